"""Dense float64 tensors and a tape-based reverse-mode differentiation engine.

Tensors are immutable wrappers around read-only numpy arrays. Operations are
plain functions (also exposed as operators); when a :class:`DiffGraph` is
active on the current thread and at least one operand is tracked by it, the
operation is appended to the graph's tape together with its vector-Jacobian
product. :meth:`DiffGraph.backward` replays the tape in reverse.

Subgradient conventions (fixed so that training is reproducible):

* ``abs`` has derivative 0 at 0;
* ``maximum``/``minimum`` pass the adjoint to the first operand on ties;
* ``relu`` has derivative 0 at 0.

Binary elementwise operations require equal shapes. The only implicit
broadcast is a 0-d operand (a Python scalar constant).
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "DiffGraph",
    "tensor",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "abs",
    "maximum",
    "minimum",
    "relu",
    "softplus",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "matmul",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "add_bias",
    "gather_cols",
    "scatter_cols",
    "softmax_cross_entropy",
    "softmax_share",
    "elementwise",
]

_local = threading.local()


def _graph_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_graph() -> "DiffGraph | None":
    stack = _graph_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable dense array of 64-bit reals."""

    __slots__ = ("data",)
    __array_priority__ = 100.0

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # arr must be freshly allocated or a read-only view of tensor data
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if not arr.flags.owndata and arr.base is not None and arr.flags.writeable:
            arr = arr.copy()
        arr.flags.writeable = False
        t.data = arr
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying array."""
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def tolist(self):
        return self.data.tolist()

    def __array__(self, dtype=None, copy=None):
        if dtype is not None and np.dtype(dtype) != self.data.dtype:
            return self.data.astype(dtype)
        if copy:
            return self.data.copy()
        return self.data

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        body = np.array2string(self.data, precision=6, separator=", ")
        return f"Tensor({body})"

    # Identity semantics: tensors are used as dictionary keys for adjoints.
    __hash__ = object.__hash__

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported; use scale()")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __abs__(self):
        return abs(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None) -> "Tensor":
        return sum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return mean(self, axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data) -> Tensor:
    return Tensor(data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("output", "inputs", "vjp", "op")

    def __init__(self, output, inputs, vjp, op):
        self.output = output
        self.inputs = inputs
        self.vjp = vjp
        self.op = op


class DiffGraph:
    """Tape of recorded operations.

    Use as a context manager; inside the block, operations on watched tensors
    (and on anything derived from them) are recorded::

        with DiffGraph() as g:
            w = g.watch(Tensor([[1.0, 2.0]]))
            loss = (w * w).sum()
        grads = g.backward(loss)      # {w: Tensor([[2., 4.]])}

    A graph belongs to the thread that created it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._tracked: dict[int, Tensor] = {}
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "DiffGraph":
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _graph_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("DiffGraph exited out of order")
        stack.pop()

    def watch(self, *tensors: Tensor):
        """Mark tensors as leaves. Returns the argument(s) unchanged."""
        for t in tensors:
            if not isinstance(t, Tensor):
                raise TypeError("only Tensors can be watched")
            self._tracked[id(t)] = t
            self._leaves[id(t)] = t
        return tensors[0] if len(tensors) == 1 else tensors

    def leaf(self, data) -> Tensor:
        return self.watch(Tensor(data))

    @property
    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())

    def is_tracked(self, t) -> bool:
        return isinstance(t, Tensor) and id(t) in self._tracked

    def _record(self, out: Tensor, inputs: tuple, vjp: Callable, op: str) -> None:
        self.nodes.append(_Node(out, inputs, vjp, op))
        self._tracked[id(out)] = out

    def backward(self, root: Tensor) -> dict:
        """Adjoints of a scalar ``root`` with respect to every watched leaf.

        Returns a dict keyed by leaf tensor. Leaves that ``root`` does not
        depend on get zero adjoints. The tape is not modified, so calling this
        twice gives identical results.
        """
        if not isinstance(root, Tensor):
            raise ContractError("backward root must be a Tensor")
        if root.size != 1:
            raise ContractError(f"backward root must be scalar, got shape {root.shape}")
        adj: dict[int, np.ndarray] = {}
        if id(root) in self._tracked:
            adj[id(root)] = np.ones(root.shape)
        for node in reversed(self.nodes):
            key = id(node.output)
            g = adj.get(key) if key in self._leaves else adj.pop(key, None)
            if g is None:
                continue
            grads = node.vjp(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or id(inp) not in self._tracked:
                    continue
                prev = adj.get(id(inp))
                adj[id(inp)] = gi if prev is None else prev + gi
        out = {}
        for key, leaf in self._leaves.items():
            g = adj.get(key)
            out[leaf] = Tensor._wrap(np.zeros(leaf.shape) if g is None else np.array(g, dtype=np.float64))
        return out

    def gradient(self, root: Tensor, wrt: Sequence[Tensor]) -> list[Tensor]:
        """Adjoints of ``root`` for the listed leaves, in order."""
        adj = self.backward(root)
        missing = [i for i, t in enumerate(wrt) if t not in adj]
        if missing:
            raise ContractError(f"tensors at positions {missing} are not leaves of this graph")
        return [adj[t] for t in wrt]


def _emit(out: np.ndarray, inputs: tuple, vjp: Callable, op: str) -> Tensor:
    t = Tensor._wrap(out)
    g = active_graph()
    if g is not None and any(g.is_tracked(i) for i in inputs):
        g._record(t, inputs, vjp, op)
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    # only 0-d operands are ever broadcast
    return np.asarray(grad.sum()).reshape(shape)


def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,), "scale")


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    ad = a.data
    return _emit(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def abs_scale_add(a, g: float, b, h: float) -> Tensor:
    """``g*|a| + h*b`` with a single fresh array (used on large interval operands)."""
    a, b = _binary_operands(a, b, "abs_scale_add")
    if a.shape != b.shape:
        raise DimensionError(f"abs_scale_add: shape mismatch {a.shape} vs {b.shape}")
    g, h = float(g), float(h)
    ad, bd = a.data, b.data
    out = np.abs(ad)
    if h == 0.0:
        out *= g
    else:
        out *= g / h
        out += bd
        out *= h
    return _emit(out, (a, b), lambda gr: (gr * (g * np.sign(ad)), gr * h), "abs_scale_add")


def maximum(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "maximum")
    first = a.data >= b.data
    sa, sb = a.shape, b.shape
    return _emit(
        np.where(first, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(first, g, 0.0), sa), _unbroadcast(np.where(first, 0.0, g), sb)),
        "maximum",
    )


def minimum(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "minimum")
    first = a.data <= b.data
    sa, sb = a.shape, b.shape
    return _emit(
        np.where(first, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(first, g, 0.0), sa), _unbroadcast(np.where(first, 0.0, g), sb)),
        "minimum",
    )


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def softplus(a) -> Tensor:
    """log(1 + exp(x)); saturates to x for large x without overflow."""
    a = as_tensor(a)
    s = _sigmoid_np(a.data)
    return _emit(np.logaddexp(0.0, a.data), (a,), lambda g: (g * s,), "softplus")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid_np(a.data)
    return _emit(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _emit(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    return _emit(e, (a,), lambda g: (g * e,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _emit(np.log(x), (a,), lambda g: (g / x,), "log")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _emit(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def sum(a, axis=None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(out), (a,), vjp, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis), 1.0 / float(count))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    out = a.data.reshape(shape)
    if out.size != a.size:
        raise DimensionError(f"reshape: cannot reshape {src} to {shape}")
    return _emit(out.copy(), (a,), lambda g: (np.reshape(g, src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit(a.data.transpose(axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def add_bias(x, b) -> Tensor:
    """Add a length-k vector to every row of an (N, k) matrix."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match rows of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _emit(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)), "add_bias")


def gather_cols(x, idx: np.ndarray) -> Tensor:
    """out[n, *p] = x[n, idx[*p]], with idx == -1 producing 0 (zero padding)."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"gather_cols expects a 2-d tensor, got {x.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    valid = idx >= 0
    safe = np.where(valid, idx, 0)
    out = np.where(valid, x.data[:, safe], 0.0)
    width = x.shape[1]

    def vjp(g):
        return (_scatter_np(g, safe, valid, width),)

    return _emit(out, (x,), vjp, "gather_cols")


def _scatter_np(y: np.ndarray, safe: np.ndarray, valid: np.ndarray, width: int) -> np.ndarray:
    n = y.shape[0]
    flat_idx = safe[valid]
    vals = y[:, valid]
    out = np.zeros((n, width))
    # bincount per row: fixed accumulation order, much faster than np.add.at
    for row in range(n):
        out[row] = np.bincount(flat_idx, weights=vals[row], minlength=width)
    return out


def scatter_cols(y, idx: np.ndarray, width: int) -> Tensor:
    """Adjoint of :func:`gather_cols`: out[n, j] = sum of y[n, p] over idx[p] == j."""
    y = as_tensor(y)
    idx = np.asarray(idx, dtype=np.intp)
    if y.shape[1:] != idx.shape:
        raise DimensionError(f"scatter_cols: values {y.shape} do not match index {idx.shape}")
    valid = idx >= 0
    safe = np.where(valid, idx, 0)
    out = _scatter_np(y.data, safe, valid, width)

    def vjp(g):
        return (np.where(valid, g[:, safe], 0.0),)

    return _emit(out, (y,), vjp, "scatter_cols")


def _logsumexp_rows(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))[..., 0]


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Per-row cross-entropy of softmax(logits) against integer labels."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects (N, m) logits, got {logits.shape}")
    n, m = logits.shape
    labels = np.broadcast_to(np.asarray(labels, dtype=np.intp), (n,))
    if np.any(labels < 0) or np.any(labels >= m):
        raise ContractError(f"labels must lie in [0, {m})")
    z = logits.data
    lse = _logsumexp_rows(z)
    out = lse - z[np.arange(n), labels]
    p = np.exp(z - lse[:, None])
    p[np.arange(n), labels] -= 1.0
    return _emit(out, (logits,), lambda g: (p * np.asarray(g)[:, None],), "softmax_cross_entropy")


def softmax_share(own, others) -> Tensor:
    """s[n, k] = exp(own_k) / (exp(own_k) + sum_{j != k} exp(others_j)).

    With ``own`` = lower logits and ``others`` = upper logits this is the
    smallest softmax probability over a logit box; swapping the arguments
    gives the largest. Every row/class is evaluated with its own max-shift so
    the denominator never underflows.
    """
    own, others = as_tensor(own), as_tensor(others)
    if own.shape != others.shape or own.ndim != 2:
        raise DimensionError(f"softmax_share: shapes {own.shape} and {others.shape}")
    n, m = own.shape
    eye = np.eye(m, dtype=bool)
    # terms[n, k, j]: others_j for j != k, own_k on the diagonal
    terms = np.where(eye[None], own.data[:, :, None], others.data[:, None, :])
    shift = terms.max(axis=2, keepdims=True)
    e = np.exp(terms - shift)
    p = e / e.sum(axis=2, keepdims=True)
    s = p[:, np.arange(m), np.arange(m)].copy()

    def vjp(g):
        gs = g * s
        g_own = gs * (1.0 - s)
        off = np.where(eye[None], 0.0, p)
        g_oth = -np.einsum("nk,nkj->nj", gs, off)
        return g_own, g_oth

    return _emit(s, (own, others), vjp, "softmax_share")


_UNARY = {
    "abs": abs,
    "relu": relu,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "negate": neg,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "max": maximum, "min": minimum}


def elementwise(op: str, *operands, factor: float | None = None) -> Tensor:
    """Dispatch an elementwise operation by name (``scale`` takes ``factor``)."""
    if op == "scale":
        if factor is None or len(operands) != 1:
            raise ContractError("scale takes one operand and a factor")
        return scale(operands[0], factor)
    if op in _UNARY:
        if len(operands) != 1:
            raise ContractError(f"{op} takes one operand")
        return _UNARY[op](operands[0])
    if op in _BINARY:
        if len(operands) != 2:
            raise ContractError(f"{op} takes two operands")
        return _BINARY[op](*operands)
    raise ContractError(f"unknown elementwise op {op!r}")


def stack_params(params: Iterable[Tensor]) -> np.ndarray:
    """Concatenate flattened parameter arrays (helper for finite differences)."""
    return np.concatenate([np.asarray(p).ravel() for p in params])
