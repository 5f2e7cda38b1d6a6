"""Feed-forward networks, exact forward pass and exact input gradients.

Activations are carried as row-major batches of flat feature vectors
``(N, n)``. Convolutions are realised as an index gather (im2col) followed by
a matrix product, so every affine layer reduces to ``rows @ W.T + b`` and the
interval code can share a single path.

Weights are stored as ``(out, in)`` matrices; a convolution with ``F``
filters over ``C`` channels stores ``(F, C*kh*kw)`` in ``(c, i, j)`` order.
Flattened activation order for images is ``(channel, row, col)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Sequence, Union

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, DataFormatError
from .tensor import Tensor

FORMAT_NAME = "gradcert-network"
FORMAT_VERSION = 1

ACTIVATIONS = ("relu", "softplus", "sigmoid", "tanh", "identity")


@dataclass(frozen=True)
class Dense:
    out_features: int


@dataclass(frozen=True)
class Conv2D:
    filters: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class Flatten:
    pass


LayerKind = Union[Dense, Conv2D, Flatten]


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    activation: str
    in_shape: tuple
    out_shape: tuple
    weight: Tensor | None = None
    bias: Tensor | None = None

    @property
    def is_affine(self) -> bool:
        return not isinstance(self.kind, Flatten)

    @property
    def in_size(self) -> int:
        return int(np.prod(self.in_shape))

    @property
    def out_size(self) -> int:
        return int(np.prod(self.out_shape))


@dataclass(frozen=True)
class Network:
    layers: tuple
    input_shape: tuple

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def class_count(self) -> int:
        return self.layers[-1].out_size

    def parameters(self) -> list[Tensor]:
        """Flat list ``[W1, b1, W2, b2, ...]`` over affine layers."""
        out = []
        for layer in self.layers:
            if layer.is_affine:
                out.extend([layer.weight, layer.bias])
        return out

    def with_parameters(self, params: Sequence) -> "Network":
        params = list(params)
        expected = self.parameters()
        if len(params) != len(expected):
            raise ContractError(f"expected {len(expected)} parameter tensors, got {len(params)}")
        layers, k = [], 0
        for layer in self.layers:
            if layer.is_affine:
                w, b = T.as_tensor(params[k]), T.as_tensor(params[k + 1])
                if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                    raise DimensionError(
                        f"parameter shapes {w.shape}/{b.shape} do not match {layer.weight.shape}/{layer.bias.shape}"
                    )
                layer = replace(layer, weight=w, bias=b)
                k += 2
            layers.append(layer)
        return replace(self, layers=tuple(layers))

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())


# ---------------------------------------------------------------------------
# construction


@lru_cache(maxsize=64)
def conv_index(in_shape: tuple, kind: Conv2D) -> tuple[np.ndarray, tuple]:
    """im2col gather indices for a convolution.

    Returns ``(idx, out_shape)`` where ``idx`` has shape ``(P, C*kh*kw)``;
    entry ``idx[p, q]`` is the flat input index read by patch ``p`` at kernel
    offset ``q``, or -1 for zero padding.
    """
    c, h, w = in_shape
    kh, kw, s, pad = kind.kernel_h, kind.kernel_w, kind.stride, kind.padding
    ho = (h + 2 * pad - kh) // s + 1
    wo = (w + 2 * pad - kw) // s + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"kernel {kh}x{kw} does not fit input {in_shape} with padding {pad}")
    ci, ki, kj = np.meshgrid(np.arange(c), np.arange(kh), np.arange(kw), indexing="ij")
    ci, ki, kj = ci.ravel(), ki.ravel(), kj.ravel()
    oi, oj = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    rows = oi.ravel()[:, None] * s - pad + ki[None, :]
    cols = oj.ravel()[:, None] * s - pad + kj[None, :]
    inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    idx = np.where(inside, ci[None, :] * h * w + rows * w + cols, -1)
    idx.flags.writeable = False
    return idx, (kind.filters, ho, wo)


def _layer_shapes(kind: LayerKind, in_shape: tuple) -> tuple[tuple, tuple | None]:
    """(out_shape, weight_shape) for a layer kind applied to ``in_shape``."""
    if isinstance(kind, Dense):
        if len(in_shape) != 1:
            raise DimensionError(f"Dense layer needs a flat input, got shape {in_shape}; insert Flatten")
        return (kind.out_features,), (kind.out_features, in_shape[0])
    if isinstance(kind, Conv2D):
        if len(in_shape) != 3:
            raise DimensionError(f"Conv2D needs a (C, H, W) input, got {in_shape}")
        _, out_shape = conv_index(tuple(in_shape), kind)
        return out_shape, (kind.filters, in_shape[0] * kind.kernel_h * kind.kernel_w)
    if isinstance(kind, Flatten):
        return (int(np.prod(in_shape)),), None
    raise ContractError(f"unknown layer kind {kind!r}")


def build_network(input_shape, plan: Sequence[tuple], seed: int = 0, hidden_bias: float = 0.0) -> Network:
    """Build a network from ``[(kind, activation), ...]`` with Glorot-uniform
    weights. Hidden-layer biases start at ``hidden_bias``; the output bias at 0.
    A positive value keeps ReLU units active early on, which helps training
    under explanation-width penalties."""
    rng = np.random.default_rng(seed)
    shape = tuple(int(s) for s in input_shape)
    layers = []
    last_affine = max(i for i, (kind, _) in enumerate(plan) if not isinstance(kind, Flatten))
    for i, (kind, act) in enumerate(plan):
        if act not in ACTIVATIONS:
            raise ContractError(f"unknown activation {act!r}")
        out_shape, wshape = _layer_shapes(kind, shape)
        w = b = None
        if wshape is not None:
            fan_out, fan_in = wshape
            if isinstance(kind, Conv2D):
                fan_out = kind.filters * kind.kernel_h * kind.kernel_w
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            w = Tensor(rng.uniform(-limit, limit, size=wshape))
            b = Tensor(np.full(wshape[0], 0.0 if i == last_affine else float(hidden_bias)))
        elif act != "identity":
            raise ContractError("Flatten layers carry the identity activation")
        layers.append(LayerSpec(kind, act, shape, out_shape, w, b))
        shape = out_shape
    return Network(tuple(layers), tuple(int(s) for s in input_shape))


def preset(
    name: str, input_shape, class_count: int, seed: int = 0, activation: str = "relu", hidden_bias: float = 0.0
) -> Network:
    """Named architectures.

    ``fcn-2x128`` / ``fcn-2x256``: two hidden dense layers. ``cnn-small``: two
    4x4 convolutions (16 filters stride 2, 32 filters stride 1), a 100-unit
    dense layer, then the logits. ``halfmoons``: two hidden layers of 64.
    ``linear``: a single dense layer.
    """
    input_shape = tuple(input_shape)
    flat = [] if len(input_shape) == 1 else [(Flatten(), "identity")]
    out = (Dense(class_count), "identity")
    if name in ("fcn-2x128", "fcn-2x256", "halfmoons"):
        width = {"fcn-2x128": 128, "fcn-2x256": 256, "halfmoons": 64}[name]
        plan = flat + [(Dense(width), activation), (Dense(width), activation), out]
    elif name == "cnn-small":
        if len(input_shape) != 3:
            raise ContractError("cnn-small needs an image input shape (C, H, W)")
        plan = [
            (Conv2D(16, 4, 4, stride=2), activation),
            (Conv2D(32, 4, 4, stride=1), activation),
            (Flatten(), "identity"),
            (Dense(100), activation),
            out,
        ]
    elif name == "linear":
        plan = flat + [out]
    else:
        raise ContractError(f"unknown architecture preset {name!r}")
    return build_network(input_shape, plan, seed, hidden_bias)


# ---------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class CrossEntropy:
    """Softmax cross-entropy against class ``label`` (int or per-row array)."""

    label: object = 0


@dataclass(frozen=True)
class ClassLogit:
    """The raw logit of class ``cls``; its gradient seed is a constant one-hot."""

    cls: object = 0


@dataclass(frozen=True)
class SquaredError:
    """Sum of squared errors against ``target`` (shape (m,) or (N, m))."""

    target: object = field(default_factory=lambda: np.zeros(1))


LossKind = Union[CrossEntropy, ClassLogit, SquaredError]


def _class_rows(value, n: int, m: int) -> np.ndarray:
    c = np.broadcast_to(np.asarray(value, dtype=np.intp), (n,))
    if np.any(c < 0) or np.any(c >= m):
        raise ContractError(f"class index out of range [0, {m}): {np.unique(c[(c < 0) | (c >= m)])}")
    return c


def _onehot(c: np.ndarray, m: int) -> np.ndarray:
    out = np.zeros((c.shape[0], m))
    out[np.arange(c.shape[0]), c] = 1.0
    return out


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def loss_seed(loss: LossKind, logits: np.ndarray) -> np.ndarray:
    """dL/dz at the logits, per row."""
    n, m = logits.shape
    if isinstance(loss, CrossEntropy):
        return _softmax_np(logits) - _onehot(_class_rows(loss.label, n, m), m)
    if isinstance(loss, ClassLogit):
        return _onehot(_class_rows(loss.cls, n, m), m)
    if isinstance(loss, SquaredError):
        y = np.broadcast_to(np.asarray(loss.target, dtype=np.float64), logits.shape)
        return 2.0 * (logits - y)
    raise ContractError(f"unknown loss {loss!r}")


def loss_value(loss: LossKind, logits: np.ndarray) -> np.ndarray:
    """Per-row loss value."""
    n, m = logits.shape
    if isinstance(loss, CrossEntropy):
        c = _class_rows(loss.label, n, m)
        z = logits - logits.max(axis=1, keepdims=True)
        return np.log(np.exp(z).sum(axis=1)) - z[np.arange(n), c]
    if isinstance(loss, ClassLogit):
        return logits[np.arange(n), _class_rows(loss.cls, n, m)]
    if isinstance(loss, SquaredError):
        y = np.broadcast_to(np.asarray(loss.target, dtype=np.float64), logits.shape)
        return ((logits - y) ** 2).sum(axis=1)
    raise ContractError(f"unknown loss {loss!r}")


def loss_tensor(loss: LossKind, logits: Tensor) -> Tensor:
    """Per-row loss as a recorded tensor expression."""
    n, m = logits.shape
    if isinstance(loss, CrossEntropy):
        return T.softmax_cross_entropy(logits, _class_rows(loss.label, n, m))
    if isinstance(loss, ClassLogit):
        return T.sum(logits * Tensor(_onehot(_class_rows(loss.cls, n, m), m)), axis=1)
    if isinstance(loss, SquaredError):
        y = np.broadcast_to(np.asarray(loss.target, dtype=np.float64), logits.shape)
        diff = logits - Tensor(y)
        return T.sum(diff * diff, axis=1)
    raise ContractError(f"unknown loss {loss!r}")


def loss_seed_tensor(loss: LossKind, logits: Tensor) -> Tensor:
    """dL/dz as a recorded tensor expression (for second-order use)."""
    n, m = logits.shape
    if isinstance(loss, CrossEntropy):
        return T.softmax_share(logits, logits) - Tensor(_onehot(_class_rows(loss.label, n, m), m))
    if isinstance(loss, ClassLogit):
        return Tensor(_onehot(_class_rows(loss.cls, n, m), m))
    if isinstance(loss, SquaredError):
        y = np.broadcast_to(np.asarray(loss.target, dtype=np.float64), logits.shape)
        return T.scale(logits - Tensor(y), 2.0)
    raise ContractError(f"unknown loss {loss!r}")


# ---------------------------------------------------------------------------
# exact evaluation (numpy)


def act_np(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "softplus":
        return np.logaddexp(0.0, x)
    if name == "sigmoid":
        return np.exp(-np.logaddexp(0.0, -x))
    if name == "tanh":
        return np.tanh(x)
    if name == "identity":
        return x
    raise ContractError(f"unknown activation {name!r}")


def act_derivative_np(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (x > 0).astype(np.float64)
    if name == "softplus":
        return act_np("sigmoid", x)
    if name == "sigmoid":
        s = act_np("sigmoid", x)
        return s * (1.0 - s)
    if name == "tanh":
        t = np.tanh(x)
        return 1.0 - t * t
    if name == "identity":
        return np.ones_like(x)
    raise ContractError(f"unknown activation {name!r}")


def as_batch(net: Network, x) -> tuple[np.ndarray, bool]:
    """Coerce ``x`` to ``(N, n)``; the flag says whether a single example was given."""
    arr = np.asarray(x, dtype=np.float64)
    n = net.input_size
    if arr.shape == tuple(net.input_shape) or (arr.ndim == 1 and arr.size == n):
        return arr.reshape(1, n), True
    if arr.ndim >= 2 and int(np.prod(arr.shape[1:])) == n and (
        arr.ndim == 2 or tuple(arr.shape[1:]) == tuple(net.input_shape)
    ):
        return arr.reshape(arr.shape[0], n), False
    raise DimensionError(f"input of shape {arr.shape} does not match network input {net.input_shape}")


def _affine_np(layer: LayerSpec, z: np.ndarray) -> np.ndarray:
    w, b = layer.weight.data, layer.bias.data
    if isinstance(layer.kind, Dense):
        return z @ w.T + b
    idx, (f, ho, wo) = conv_index(layer.in_shape, layer.kind)
    n = z.shape[0]
    valid = idx >= 0
    patches = np.where(valid, z[:, np.where(valid, idx, 0)], 0.0)  # (N, P, Ckk)
    out = patches.reshape(n * idx.shape[0], -1) @ w.T + b  # (N*P, F)
    return out.reshape(n, idx.shape[0], f).transpose(0, 2, 1).reshape(n, f * ho * wo)


def _affine_transpose_np(layer: LayerSpec, e: np.ndarray) -> np.ndarray:
    w = layer.weight.data
    if isinstance(layer.kind, Dense):
        return e @ w
    idx, (f, ho, wo) = conv_index(layer.in_shape, layer.kind)
    n, p = e.shape[0], idx.shape[0]
    cols = e.reshape(n, f, p).transpose(0, 2, 1).reshape(n * p, f) @ w  # (N*P, Ckk)
    cols = cols.reshape(n, p, -1)
    valid = idx >= 0
    flat = np.where(valid, idx, 0)[valid]
    vals = cols[:, valid]
    out = np.zeros((n, layer.in_size))
    for row in range(n):
        out[row] = np.bincount(flat, weights=vals[row], minlength=layer.in_size)
    return out


def forward(net: Network, x) -> tuple[np.ndarray, list]:
    """Logits and per-layer caches ``[(pre_activation, activation), ...]``.

    Single-example inputs give 1-d logits; caches are always batched.
    """
    z, single = as_batch(net, x)
    caches = []
    for layer in net.layers:
        pre = _affine_np(layer, z) if layer.is_affine else z
        z = act_np(layer.activation, pre)
        caches.append((pre, z))
    return (z[0] if single else z), caches


def input_gradient(net: Network, x, loss: LossKind, caches=None) -> np.ndarray:
    """Exact gradient of ``loss`` with respect to the input, per row.

    Runs d <- W^T (act'(pre) * d) from the loss seed down to the input.
    """
    xb, single = as_batch(net, x)
    if caches is None:
        _, caches = forward(net, xb)
    logits = caches[-1][1]
    d = loss_seed(loss, logits)
    for layer, (pre, _) in zip(reversed(net.layers), reversed(caches)):
        if not layer.is_affine:
            continue
        e = act_derivative_np(layer.activation, pre) * d
        d = _affine_transpose_np(layer, e)
    return d[0].reshape(net.input_shape) if single and len(net.input_shape) > 1 else (d[0] if single else d)


def predict(net: Network, x) -> np.ndarray | int:
    """Argmax class; ties go to the lowest index."""
    logits, _ = forward(net, x)
    if logits.ndim == 1:
        return int(np.argmax(logits))
    return np.argmax(logits, axis=1)


# ---------------------------------------------------------------------------
# recorded evaluation (tensor engine)


def act_tensor(name: str, x: Tensor) -> Tensor:
    if name == "relu":
        return T.relu(x)
    if name == "softplus":
        return T.softplus(x)
    if name == "sigmoid":
        return T.sigmoid(x)
    if name == "tanh":
        return T.tanh(x)
    if name == "identity":
        return x
    raise ContractError(f"unknown activation {name!r}")


def act_derivative_tensor(name: str, x: Tensor) -> Tensor:
    if name == "relu":
        return Tensor(x.data > 0)
    if name == "softplus":
        return T.sigmoid(x)
    if name == "sigmoid":
        s = T.sigmoid(x)
        return s - s * s
    if name == "tanh":
        t = T.tanh(x)
        return 1.0 - t * t
    if name == "identity":
        return Tensor(np.ones(x.shape))
    raise ContractError(f"unknown activation {name!r}")


def affine_tensor(layer: LayerSpec, z: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """rows @ W.T + b for dense layers; im2col + matmul for convolutions."""
    if isinstance(layer.kind, Dense):
        return T.add_bias(T.matmul(z, T.transpose(weight)), bias)
    idx, (f, ho, wo) = conv_index(layer.in_shape, layer.kind)
    n, p = z.shape[0], idx.shape[0]
    patches = T.reshape(T.gather_cols(z, idx), (n * p, idx.shape[1]))
    out = T.add_bias(T.matmul(patches, T.transpose(weight)), bias)
    return T.reshape(T.transpose(T.reshape(out, (n, p, f)), (0, 2, 1)), (n, f * ho * wo))


def affine_transpose_tensor(layer: LayerSpec, e: Tensor, weight: Tensor) -> Tensor:
    if isinstance(layer.kind, Dense):
        return T.matmul(e, weight)
    idx, (f, ho, wo) = conv_index(layer.in_shape, layer.kind)
    n, p = e.shape[0], idx.shape[0]
    rows = T.reshape(T.transpose(T.reshape(e, (n, f, p)), (0, 2, 1)), (n * p, f))
    cols = T.reshape(T.matmul(rows, weight), (n, p, idx.shape[1]))
    return T.scatter_cols(cols, idx, layer.in_size)


def forward_tensor(net: Network, x: Tensor) -> tuple[Tensor, list]:
    """Recorded forward pass on an ``(N, n)`` tensor; returns logits and caches."""
    if x.ndim != 2 or x.shape[1] != net.input_size:
        raise DimensionError(f"expected (N, {net.input_size}) input, got {x.shape}")
    z, caches = x, []
    for layer in net.layers:
        pre = affine_tensor(layer, z, layer.weight, layer.bias) if layer.is_affine else z
        z = act_tensor(layer.activation, pre)
        caches.append((pre, z))
    return z, caches


def input_gradient_tensor(net: Network, x: Tensor, loss: LossKind) -> Tensor:
    """Input gradient built from recorded operations.

    Differentiating a function of this result gives second-order information
    (gradients of explanation objectives with respect to inputs or weights).
    For ReLU layers the activation derivative enters as a constant mask.
    """
    logits, caches = forward_tensor(net, x)
    d = loss_seed_tensor(loss, logits)
    for layer, (pre, _) in zip(reversed(net.layers), reversed(caches)):
        if not layer.is_affine:
            continue
        d = affine_transpose_tensor(layer, act_derivative_tensor(layer.activation, pre) * d, layer.weight)
    return d


# ---------------------------------------------------------------------------
# serialisation


def _kind_to_dict(kind: LayerKind) -> dict:
    if isinstance(kind, Dense):
        return {"kind": "dense", "out_features": kind.out_features}
    if isinstance(kind, Conv2D):
        return {
            "kind": "conv2d",
            "filters": kind.filters,
            "kernel_h": kind.kernel_h,
            "kernel_w": kind.kernel_w,
            "stride": kind.stride,
            "padding": kind.padding,
        }
    return {"kind": "flatten"}


def _kind_from_dict(d: dict) -> LayerKind:
    k = d.get("kind")
    if k == "dense":
        return Dense(int(d["out_features"]))
    if k == "conv2d":
        return Conv2D(int(d["filters"]), int(d["kernel_h"]), int(d["kernel_w"]), int(d.get("stride", 1)), int(d.get("padding", 0)))
    if k == "flatten":
        return Flatten()
    raise DataFormatError(f"unknown layer kind {k!r}")


def _array_to_dict(t: Tensor) -> dict:
    return {"shape": list(t.shape), "data": [float(v) for v in t.data.ravel()]}


def _array_from_dict(d: dict) -> Tensor:
    shape = tuple(int(s) for s in d["shape"])
    data = np.asarray(d["data"], dtype=np.float64)
    if data.size != int(np.prod(shape)):
        raise DataFormatError(f"parameter array has {data.size} values for shape {shape}")
    return Tensor(data.reshape(shape))


def to_dict(net: Network) -> dict:
    layers = []
    for layer in net.layers:
        entry = _kind_to_dict(layer.kind)
        entry["activation"] = layer.activation
        if layer.is_affine:
            entry["weight"] = _array_to_dict(layer.weight)
            entry["bias"] = _array_to_dict(layer.bias)
        layers.append(entry)
    return {"format": FORMAT_NAME, "version": FORMAT_VERSION, "input_shape": list(net.input_shape), "layers": layers}


def from_dict(doc: dict) -> Network:
    if doc.get("format") != FORMAT_NAME:
        raise DataFormatError(f"not a {FORMAT_NAME} document")
    if doc.get("version") != FORMAT_VERSION:
        raise DataFormatError(f"unsupported model version {doc.get('version')!r}")
    shape = tuple(int(s) for s in doc["input_shape"])
    in_shape, layers = shape, []
    for i, entry in enumerate(doc["layers"]):
        kind = _kind_from_dict(entry)
        act = entry.get("activation", "identity")
        if act not in ACTIVATIONS:
            raise DataFormatError(f"layer {i}: unknown activation {act!r}")
        out_shape, wshape = _layer_shapes(kind, in_shape)
        w = b = None
        if wshape is not None:
            w, b = _array_from_dict(entry["weight"]), _array_from_dict(entry["bias"])
            if w.shape != wshape or b.shape != (wshape[0],):
                raise DataFormatError(f"layer {i}: parameter shapes {w.shape}/{b.shape}, expected {wshape}")
        layers.append(LayerSpec(kind, act, in_shape, out_shape, w, b))
        in_shape = out_shape
    return Network(tuple(layers), shape)


def dumps(net: Network) -> str:
    # json emits floats with repr(), the shortest string that round-trips exactly
    return json.dumps(to_dict(net), separators=(",", ":"))


def loads(text: str) -> Network:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"model file is not valid JSON: {exc.msg}", offset=exc.pos) from exc
    if not isinstance(doc, dict):
        raise DataFormatError("model file must hold a JSON object")
    try:
        return from_dict(doc)
    except DataFormatError:
        raise
    except (KeyError, TypeError, ValueError, ContractError) as exc:
        raise DataFormatError(f"malformed model document: {type(exc).__name__}: {exc}") from exc


def save(net: Network, path) -> None:
    from .util import atomic_write_text

    atomic_write_text(path, dumps(net))


def load(path) -> Network:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())
