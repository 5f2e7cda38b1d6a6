"""Datasets: tabular CSV with a JSON schema, IDX image files, synthetic sets.

Every dataset carries per-feature domain bounds so that input boxes can be
clipped to the valid domain.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, DataFormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # (N, n), float64
    labels: np.ndarray  # (N,), int
    feature_lo: np.ndarray
    feature_hi: np.ndarray
    name: str = "dataset"
    input_shape: tuple = ()
    class_count: int = 2
    sensitive_indices: tuple = ()
    groups: np.ndarray | None = None  # per-row code of the binary sensitive attribute
    feature_names: tuple = ()
    encoding: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.intp)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise ContractError(f"inputs {x.shape} and labels {y.shape} do not form a dataset")
        if not self.input_shape:
            object.__setattr__(self, "input_shape", (x.shape[1],))
        if y.size and (y.min() < 0 or y.max() >= self.class_count):
            raise ContractError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def feature_bounds(self) -> tuple:
        return self.feature_lo, self.feature_hi

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(
            self,
            inputs=self.inputs[idx],
            labels=self.labels[idx],
            groups=None if self.groups is None else self.groups[idx],
        )


def train_test_split(ds: Dataset, fraction: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded shuffle, then the first ``fraction`` of rows for training."""
    if not 0 < fraction < 1:
        raise ContractError("split fraction must lie in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(ds))
    cut = int(round(fraction * len(ds)))
    return ds.subset(np.sort(order[:cut])), ds.subset(np.sort(order[cut:]))


# ---------------------------------------------------------------------------
# tabular


def _read_schema(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            schema = json.load(fh)
    except FileNotFoundError:
        raise DataFormatError("schema file not found", path=str(path)) from None
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"schema is not valid JSON: {exc.msg}", path=str(path), offset=exc.pos) from None
    if not isinstance(schema, dict) or "target" not in schema:
        raise DataFormatError("schema must be an object naming a 'target' column", path=str(path))
    return schema


def load_tabular(csv_path, schema_path) -> Dataset:
    """Load a CSV using a schema of the form::

        {"target": "income", "classes": ["<=50K", ">50K"],
         "categorical": ["sex", "race"], "sensitive": ["sex"],
         "numeric": ["age", "hours"], "levels": {"sex": ["female", "male"]}}

    ``numeric`` defaults to every other non-dropped column; ``classes``
    defaults to sorted target values. Categorical levels follow ``levels``
    when declared and are otherwise sorted. Numeric
    columns are min-max scaled to [0, 1] (constant columns map to 0).
    """
    schema = _read_schema(schema_path)
    path = str(csv_path)
    try:
        with open(csv_path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise DataFormatError("CSV file is empty (a header row is required)", path=path) from None
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if not row or all(not c.strip() for c in row):
                    continue
                if len(row) != len(header):
                    raise DataFormatError(
                        f"expected {len(header)} fields, found {len(row)}", path=path, row=lineno
                    )
                rows.append((lineno, [c.strip() for c in row]))
    except FileNotFoundError:
        raise DataFormatError("CSV file not found", path=path) from None

    target = schema["target"]
    categorical = list(schema.get("categorical", []))
    sensitive = list(schema.get("sensitive", []))
    drop = set(schema.get("drop", []))
    numeric = schema.get("numeric")
    if numeric is None:
        numeric = [h for h in header if h != target and h not in categorical and h not in drop]
    for col in [target, *categorical, *numeric, *sensitive]:
        if col not in header:
            raise DataFormatError(f"column {col!r} named in the schema is missing from the header", path=path, column=col)
    for col in sensitive:
        if col not in categorical and col not in numeric:
            raise DataFormatError(f"sensitive column {col!r} is neither categorical nor numeric", column=col)
    col_at = {h: i for i, h in enumerate(header)}
    if not rows:
        raise DataFormatError("CSV file has no data rows", path=path)

    # target
    raw_target = [r[col_at[target]] for _, r in rows]
    classes = [str(c) for c in schema.get("classes", sorted(set(raw_target)))]
    class_of = {c: i for i, c in enumerate(classes)}
    labels = np.empty(len(rows), dtype=np.intp)
    for k, ((lineno, _), value) in enumerate(zip(rows, raw_target)):
        if value not in class_of:
            raise DataFormatError(f"unknown class {value!r}", path=path, row=lineno, column=target)
        labels[k] = class_of[value]

    blocks, names, encoding = [], [], {"numeric": {}, "categorical": {}, "classes": classes, "columns": []}
    ordered = [h for h in header if h in numeric or h in categorical]
    index_of = {}
    for col in ordered:
        j = col_at[col]
        if col in categorical:
            declared = schema.get("levels", {}).get(col)
            levels = [str(v) for v in declared] if declared is not None else sorted({r[j] for _, r in rows})
            level_at = {v: i for i, v in enumerate(levels)}
            block = np.zeros((len(rows), len(levels)))
            for k, (lineno, r) in enumerate(rows):
                if r[j] not in level_at:
                    raise DataFormatError(f"level {r[j]!r} is not declared in the schema", path=path, row=lineno, column=col)
                block[k, level_at[r[j]]] = 1.0
            index_of[col] = list(range(sum(b.shape[1] for b in blocks), sum(b.shape[1] for b in blocks) + len(levels)))
            blocks.append(block)
            names.extend(f"{col}={v}" for v in levels)
            encoding["categorical"][col] = levels
        else:
            vals = np.empty(len(rows))
            for k, (lineno, r) in enumerate(rows):
                try:
                    vals[k] = float(r[j])
                except ValueError:
                    raise DataFormatError(f"cannot parse {r[j]!r} as a number", path=path, row=lineno, column=col) from None
                if not math.isfinite(vals[k]):
                    raise DataFormatError(f"non-finite value {r[j]!r}", path=path, row=lineno, column=col)
            lo, hi = float(vals.min()), float(vals.max())
            scaled = np.zeros_like(vals) if hi == lo else (vals - lo) / (hi - lo)
            index_of[col] = [sum(b.shape[1] for b in blocks)]
            blocks.append(scaled[:, None])
            names.append(col)
            encoding["numeric"][col] = [lo, hi]
        encoding["columns"].append(col)
    x = np.concatenate(blocks, axis=1) if blocks else np.zeros((len(rows), 0))

    sens_idx, groups = [], None
    for col in sensitive:
        sens_idx.extend(index_of[col])
    if sensitive:
        col = sensitive[0]
        j = col_at[col]
        raw = [r[j] for _, r in rows]
        levels = encoding["categorical"].get(col) or sorted(set(raw))
        if len(set(raw)) <= 2:
            counts = [raw.count(v) for v in levels]
            # majority first; ties keep level order
            order = sorted(range(len(levels)), key=lambda i: -counts[i])
            code = {levels[i]: rank for rank, i in enumerate(order)}
            groups = np.array([code[v] for v in raw], dtype=np.intp)
            encoding["groups"] = {"column": col, "majority": levels[order[0]]}
    n = x.shape[1]
    return Dataset(
        inputs=x,
        labels=labels,
        feature_lo=np.zeros(n),
        feature_hi=np.ones(n),
        name=Path(csv_path).stem,
        input_shape=(n,),
        class_count=len(classes),
        sensitive_indices=tuple(sens_idx),
        groups=groups,
        feature_names=tuple(names),
        encoding=encoding,
    )


def denormalize(ds: Dataset, x=None) -> dict:
    """Map scaled numeric features back to raw units: ``{column: values}``."""
    x = ds.inputs if x is None else np.atleast_2d(np.asarray(x, dtype=np.float64))
    out = {}
    for col, (lo, hi) in ds.encoding.get("numeric", {}).items():
        j = ds.feature_names.index(col)
        out[col] = lo + x[:, j] * (hi - lo)
    return out


# ---------------------------------------------------------------------------
# IDX


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise DataFormatError("IDX file not found", path=str(path)) from None


def _idx_header(buf: bytes, path: str, magic: int, what: str) -> tuple[list, int]:
    if len(buf) < 4:
        raise DataFormatError(f"truncated {what} file: no magic number", path=path, offset=len(buf))
    (found,) = struct.unpack(">I", buf[:4])
    if found != magic:
        raise DataFormatError(f"bad magic 0x{found:08x} for {what} file, expected 0x{magic:08x}", path=path, offset=0)
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(buf) < end:
        raise DataFormatError(f"truncated {what} header", path=path, offset=len(buf))
    dims = list(struct.unpack(f">{ndim}I", buf[4:end]))
    expected = end + int(np.prod(dims))
    if len(buf) < expected:
        raise DataFormatError(
            f"truncated {what} data: expected {expected} bytes, found {len(buf)}", path=path, offset=len(buf)
        )
    if len(buf) > expected:
        raise DataFormatError(f"{len(buf) - expected} trailing bytes after {what} data", path=path, offset=expected)
    return dims, end


def load_idx(images_path, labels_path, class_count: int = 10, name: str = "idx") -> Dataset:
    """Load an IDX image file and its label file; pixels are scaled by 1/255."""
    ibuf, lbuf = _read_bytes(images_path), _read_bytes(labels_path)
    (count, rows, cols), at = _idx_header(ibuf, str(images_path), IDX_IMAGES_MAGIC, "images")
    (lcount,), lat = _idx_header(lbuf, str(labels_path), IDX_LABELS_MAGIC, "labels")
    if count != lcount:
        raise DataFormatError(f"image count {count} does not match label count {lcount}", path=str(labels_path), offset=4)
    pixels = np.frombuffer(ibuf, dtype=np.uint8, offset=at).reshape(count, rows * cols)
    labels = np.frombuffer(lbuf, dtype=np.uint8, offset=lat).astype(np.intp)
    if labels.size and labels.max() >= class_count:
        bad = int(np.argmax(labels >= class_count))
        raise DataFormatError(f"label {labels[bad]} out of range for {class_count} classes", path=str(labels_path), offset=lat + bad)
    n = rows * cols
    return Dataset(
        inputs=pixels / 255.0,
        labels=labels,
        feature_lo=np.zeros(n),
        feature_hi=np.ones(n),
        name=name,
        input_shape=(1, rows, cols),
        class_count=class_count,
    )


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images ``(N, rows, cols)`` and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    count, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, count, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())


# ---------------------------------------------------------------------------
# synthetic sets


def half_moons(n: int = 200, noise: float = 0.1, seed: int = 0, scale: bool = True) -> Dataset:
    """Two interleaved half circles (class 0 upper, class 1 lower).

    Noise jitters each point along its arc's radius. With ``scale`` the
    points are min-max scaled to [0, 1]^2 (offset and span kept in ``encoding``).
    """
    if n <= 0 or n % 2:
        raise ContractError("half_moons needs a positive even n")
    rng = np.random.default_rng(seed)
    half = n // 2
    t = np.linspace(0.0, np.pi, half)
    r0 = 1.0 + noise * rng.standard_normal(half)
    r1 = 1.0 + noise * rng.standard_normal(half)
    upper = np.stack([r0 * np.cos(t), r0 * np.sin(t)], axis=1)
    lower = np.stack([1.0 - r1 * np.cos(t), 0.5 - r1 * np.sin(t)], axis=1)
    x = np.concatenate([upper, lower])
    y = np.concatenate([np.zeros(half, dtype=np.intp), np.ones(half, dtype=np.intp)])
    order = rng.permutation(n)
    x, y = x[order], y[order]
    lo, hi = x.min(axis=0), x.max(axis=0)
    enc = {"offset": lo.tolist(), "span": (hi - lo).tolist()}
    if scale:
        x = (x - lo) / (hi - lo)
        flo, fhi = np.zeros(2), np.ones(2)
    else:
        flo, fhi = np.full(2, -np.inf), np.full(2, np.inf)
    return Dataset(x, y, flo, fhi, name="halfmoons", input_shape=(2,), class_count=2, encoding=enc)


def half_moons_split(n_train: int, n_test: int, noise: float = 0.1, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Independent train and test moons scaled to [0, 1]^2 with one shared min-max map."""
    raw = [half_moons(n, noise, s, scale=False) for n, s in ((n_train, seed), (n_test, seed + 1))]
    both = np.concatenate([d.inputs for d in raw])
    lo, hi = both.min(axis=0), both.max(axis=0)
    enc = {"offset": lo.tolist(), "span": (hi - lo).tolist()}
    return tuple(
        replace(d, inputs=(d.inputs - lo) / (hi - lo), feature_lo=np.zeros(2), feature_hi=np.ones(2), encoding=enc)
        for d in raw
    )


def label_poison(ds: Dataset, p: float, seed: int = 0, positive: int = 1, negative: int = 0) -> Dataset:
    """Relabel a fraction ``p`` of majority-group rows positive and of minority rows negative."""
    if ds.groups is None:
        raise ContractError("label poisoning needs a resolved binary sensitive attribute")
    if not 0 <= p <= 1:
        raise ContractError("p must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    labels = ds.labels.copy()
    # majority is the more frequent group in this split; ties keep code 0
    major = 1 if np.count_nonzero(ds.groups == 1) > np.count_nonzero(ds.groups == 0) else 0
    for code, value in ((major, positive), (1 - major, negative)):
        rows = np.flatnonzero(ds.groups == code)
        k = int(math.floor(p * rows.size))
        labels[rng.choice(rows, size=k, replace=False)] = value
    return replace(ds, labels=labels)


def synthetic_digits(n_train: int = 10000, n_test: int = 1000, seed: int = 0, size: int = 28):
    """MNIST-style 28x28 digits built from the small bundled 8x8 digit set.

    Each sample is a random source digit, upscaled, slightly rotated,
    centred with one pixel of jitter and contrast-jittered, then quantised to bytes. Train and test
    draw from disjoint halves of the source images.
    """
    from scipy import ndimage
    from sklearn.datasets import load_digits

    src = load_digits()
    images, targets = src.images / 16.0, src.target.astype(np.intp)
    order = np.random.default_rng(seed).permutation(len(images))
    cut = len(order) * 4 // 5
    pools = (order[:cut], order[cut:])
    out = []
    for pool, count, sub in zip(pools, (n_train, n_test), (1, 2)):
        rng = np.random.default_rng([seed, sub])
        pick = rng.choice(pool, size=count)
        xs = np.empty((count, size, size), dtype=np.uint8)
        inner = 20
        for k, i in enumerate(pick):
            img = ndimage.zoom(images[i], inner / 8.0, order=1)
            img = ndimage.rotate(img, rng.uniform(-8, 8), reshape=False, order=1, mode="constant")
            canvas = np.zeros((size, size))
            # centred like the usual 20x20-in-28x28 layout, with one pixel of jitter
            dy, dx = (size - inner) // 2 + rng.integers(-1, 2, size=2)
            canvas[dy : dy + inner, dx : dx + inner] = img
            canvas *= rng.uniform(0.8, 1.0)
            xs[k] = np.round(np.clip(canvas, 0.0, 1.0) * 255).astype(np.uint8)
        out.append((xs, targets[pick]))
    return out


def digits_dataset(images: np.ndarray, labels: np.ndarray, name: str = "digits") -> Dataset:
    count, rows, cols = images.shape
    n = rows * cols
    return Dataset(
        inputs=images.reshape(count, n) / 255.0,
        labels=labels,
        feature_lo=np.zeros(n),
        feature_hi=np.ones(n),
        name=name,
        input_shape=(1, rows, cols),
        class_count=10,
    )


def synthetic_biased_tabular(n: int = 2000, seed: int = 0, path=None):
    """Credit-style table with a binary ``sex`` column the label does not depend on.

    Returns the CSV text and a schema dict; both are written when ``path``
    (a directory) is given.
    """
    rng = np.random.default_rng(seed)
    sex = np.where(rng.random(n) < 0.65, "male", "female")
    age = rng.integers(18, 75, size=n)
    income = np.round(rng.lognormal(10.3, 0.5, size=n), 2)
    debt = np.round(rng.uniform(0, 1, size=n) * income * 0.6, 2)
    years = rng.integers(0, 40, size=n)
    housing = rng.choice(["own", "rent", "free"], size=n, p=[0.5, 0.4, 0.1])
    score = (
        1.4 * (np.log(income) - 10.3)
        - 3.0 * debt / income
        + 0.03 * (years - 10)
        + 0.4 * (housing == "own")
        + 0.5
        + rng.normal(0, 0.4, size=n)
    )
    label = np.where(score > 0, "good", "bad")
    lines = ["age,income,debt,years_employed,housing,sex,credit"]
    for row in zip(age, income, debt, years, housing, sex, label):
        lines.append(",".join(str(v) for v in row))
    text = "\n".join(lines) + "\n"
    schema = {
        "target": "credit",
        "classes": ["bad", "good"],
        "categorical": ["housing", "sex"],
        "sensitive": ["sex"],
    }
    if path is not None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        (path / "credit.csv").write_text(text, encoding="utf-8")
        (path / "credit.schema.json").write_text(json.dumps(schema, indent=2) + "\n", encoding="utf-8")
    return text, schema
