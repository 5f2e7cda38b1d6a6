"""Exception types shared across the package."""


class GradCertError(Exception):
    """Base class for all errors raised by gradcert."""


class DimensionError(GradCertError, ValueError):
    """Operand shapes do not compose."""


class ContractError(GradCertError, ValueError):
    """A precondition of an operation was violated."""


class DataFormatError(GradCertError, ValueError):
    """A data file could not be parsed.

    ``offset`` is a byte offset for binary formats; ``row``/``column`` locate
    the problem in text formats. Unused locators are ``None``.
    """

    def __init__(self, message, *, path=None, offset=None, row=None, column=None):
        loc = []
        if path is not None:
            loc.append(str(path))
        if offset is not None:
            loc.append(f"offset {offset}")
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.path = path
        self.offset = offset
        self.row = row
        self.column = column


class TrainingDiverged(GradCertError, RuntimeError):
    """Training produced a non-finite loss."""
