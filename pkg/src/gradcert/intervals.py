"""Interval enclosures of the forward pass and of the input gradient.

Every quantity is an elementwise ``[lower, upper]`` pair of tensors. The
forward pass pushes an input box and a parameter box through each layer; the
backward pass then pushes the interval loss seed back down to the input,
giving a box guaranteed to contain every input gradient reachable by any
input in the input box combined with any parameters in the parameter box.

All closed-form operations are built from recorded tensor operations, so the
total box width can be differentiated with respect to the network weights.
The corner-exact matrix product is numpy-only (certification use).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .network import (
    ClassLogit,
    Conv2D,
    CrossEntropy,
    LayerSpec,
    LossKind,
    Network,
    SquaredError,
    _class_rows,
    _onehot,
    act_tensor,
    as_batch,
    conv_index,
)
from .tensor import Tensor

MATMUL_MODES = ("center-radius", "corners")


class IntervalMatrix:
    """Elementwise interval ``[lower, upper]``.

    Intervals built from a center and radius (as for weight boxes) keep
    those tensors and derive the endpoints only on first access, so the
    closed-form product can skip them. Endpoint-built intervals derive
    center and radius lazily in the same way.
    """

    __slots__ = ("_lower", "_upper", "_center", "_radius", "_point", "_abs_center", "_rel")

    def __init__(self, lower, upper, check: bool = True):
        lower, upper = T.as_tensor(lower), T.as_tensor(upper)
        if lower.shape != upper.shape:
            raise DimensionError(f"interval endpoints differ in shape: {lower.shape} vs {upper.shape}")
        if check and np.any(lower.data > upper.data):
            raise ContractError("interval lower bound exceeds upper bound")
        self._lower, self._upper = lower, upper
        self._center = self._radius = None
        self._point = None
        # set when radius == _rel * |center| (parameter boxes); enables a one-matmul radius
        self._abs_center = self._rel = None

    @classmethod
    def point(cls, value) -> "IntervalMatrix":
        v = T.as_tensor(value)
        out = cls(v, v, check=False)
        out._center, out._point = v, True
        return out

    @classmethod
    def from_center_radius(cls, center, radius, check: bool = True) -> "IntervalMatrix":
        center, radius = T.as_tensor(center), T.as_tensor(radius)
        if center.shape != radius.shape:
            raise DimensionError(f"interval center and radius differ in shape: {center.shape} vs {radius.shape}")
        if check and np.any(radius.data < 0):
            raise ContractError("interval radius must be non-negative")
        out = cls.__new__(cls)
        out._lower = out._upper = None
        out._center, out._radius = center, radius
        out._point = out._abs_center = out._rel = None
        return out

    @classmethod
    def relative(cls, center, magnitude, g: float) -> "IntervalMatrix":
        """Box ``center +- g*magnitude`` with ``magnitude == |center|``; the radius is built on demand."""
        out = cls.__new__(cls)
        out._lower = out._upper = out._radius = out._point = None
        out._center, out._abs_center, out._rel = T.as_tensor(center), T.as_tensor(magnitude), float(g)
        return out

    @property
    def lower(self) -> Tensor:
        if self._lower is None:
            self._lower = self._center - self.radius
        return self._lower

    @property
    def upper(self) -> Tensor:
        if self._upper is None:
            self._upper = self._center + self.radius
        return self._upper

    @property
    def shape(self) -> tuple:
        return (self._center if self._lower is None else self._lower).shape

    @property
    def center(self) -> Tensor:
        if self._center is None:
            self._center = T.scale(self.lower + self.upper, 0.5)
        return self._center

    @property
    def radius(self) -> Tensor:
        if self._radius is None:
            if self._rel is not None:
                self._radius = T.scale(self._abs_center, self._rel)
            else:
                self._radius = T.scale(self.upper - self.lower, 0.5)
        return self._radius

    @property
    def is_point(self) -> bool:
        if self._point is None:
            if self._radius is not None:
                self._point = not np.any(self._radius.data)
            elif self._rel is not None:
                self._point = self._rel == 0.0 or not np.any(self._abs_center.data)
            else:
                self._point = bool(np.array_equal(self.lower.data, self.upper.data))
        return self._point

    def contains(self, value, slack: float = 0.0) -> np.ndarray:
        v = np.asarray(value, dtype=np.float64)
        return (v >= self.lower.data - slack) & (v <= self.upper.data + slack)

    def __repr__(self) -> str:
        return f"IntervalMatrix(lower={self.lower!r}, upper={self.upper!r})"


def _check_matmul(a: IntervalMatrix, b: IntervalMatrix) -> None:
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"interval matmul: cannot multiply {a.shape} by {b.shape}")


def interval_matmul(a: IntervalMatrix, b: IntervalMatrix) -> IntervalMatrix:
    """Closed-form enclosure of ``{A @ B : A in a, B in b}``.

    center = Ac @ Bc; radius = |Ac| @ Br + Ar @ |Bc| + Ar @ Br, with the last
    two terms merged into Ar @ (|Bc| + Br). Terms that vanish for point
    intervals are skipped.
    """
    _check_matmul(a, b)
    if a.is_point and b.is_point:
        return IntervalMatrix.point(T.matmul(a.center, b.center))
    center = T.matmul(a.center, b.center)
    if b._rel is not None:
        # Br = g|Bc|: |Ac| Br + Ar (|Bc| + Br) = (g|Ac| + (1+g) Ar) |Bc|
        g = b._rel
        left = T.scale(T.abs(a.center), g) if a.is_point else T.abs_scale_add(a.center, g, a.radius, 1.0 + g)
        return IntervalMatrix.from_center_radius(center, T.matmul(left, b._abs_center), check=False)
    if a.is_point:
        radius = T.matmul(T.abs(a.center), b.radius)
    elif b.is_point:
        radius = T.matmul(a.radius, T.abs(b.center))
    else:
        radius = T.matmul(T.abs(a.center), b.radius) + T.matmul(a.radius, T.abs(b.center) + b.radius)
    return IntervalMatrix.from_center_radius(center, radius, check=False)


def _corner_products(al, au, bl, bu):
    p = (al * bl, al * bu, au * bl, au * bu)
    return np.minimum(np.minimum(p[0], p[1]), np.minimum(p[2], p[3])), np.maximum(
        np.maximum(p[0], p[1]), np.maximum(p[2], p[3])
    )


def interval_matmul_exact_corners(a: IntervalMatrix, b: IntervalMatrix, chunk: int = 1 << 21) -> IntervalMatrix:
    """Sum over k of the exact hull of each scalar product ``a[i,k] * b[k,j]``.

    Tight for the interval domain and never wider than :func:`interval_matmul`.
    Not recorded on the differentiation graph.
    """
    _check_matmul(a, b)
    al, au, bl, bu = a.lower.data, a.upper.data, b.lower.data, b.upper.data
    m, k = al.shape
    n = bl.shape[1]
    lo, hi = np.empty((m, n)), np.empty((m, n))
    rows = max(1, chunk // max(1, k * n))
    for start in range(0, m, rows):
        s = slice(start, start + rows)
        pl, pu = _corner_products(al[s, :, None], au[s, :, None], bl[None], bu[None])
        lo[s] = pl.sum(axis=1)
        hi[s] = pu.sum(axis=1)
    return IntervalMatrix(Tensor._wrap(lo), Tensor._wrap(hi), check=False)


def interval_hadamard(d: IntervalMatrix, g: IntervalMatrix) -> IntervalMatrix:
    """Exact elementwise product: min and max of the four endpoint products."""
    if d.shape != g.shape:
        raise DimensionError(f"interval hadamard: shapes {d.shape} vs {g.shape}")
    if d.is_point and g.is_point:
        return IntervalMatrix.point(d.lower * g.lower)
    if g.is_point:
        d, g = g, d
    if d.is_point:
        p, q = d.lower * g.lower, d.lower * g.upper
        return IntervalMatrix(T.minimum(p, q), T.maximum(p, q), check=False)
    if np.all(d.lower.data >= 0):
        # non-negative d (every activation derivative): extremes pair g's endpoints with either end of d
        lo = T.minimum(d.lower * g.lower, d.upper * g.lower)
        hi = T.maximum(d.lower * g.upper, d.upper * g.upper)
        return IntervalMatrix(lo, hi, check=False)
    p = (d.lower * g.lower, d.lower * g.upper, d.upper * g.lower, d.upper * g.upper)
    lo = T.minimum(T.minimum(p[0], p[1]), T.minimum(p[2], p[3]))
    hi = T.maximum(T.maximum(p[0], p[1]), T.maximum(p[2], p[3]))
    return IntervalMatrix(lo, hi, check=False)


def activation_bounds(act: str, pre: IntervalMatrix) -> IntervalMatrix:
    """[act(lower), act(upper)]; exact for monotone non-decreasing activations."""
    if act == "identity":
        return pre
    if pre.is_point:
        return IntervalMatrix.point(act_tensor(act, pre.lower))
    return IntervalMatrix(act_tensor(act, pre.lower), act_tensor(act, pre.upper), check=False)


def _peaked_derivative(act: str, x: Tensor) -> Tensor:
    if act == "sigmoid":
        s = T.sigmoid(x)
        return s - s * s
    t = T.tanh(x)
    return 1.0 - t * t


def activation_derivative_bounds(act: str, pre: IntervalMatrix) -> IntervalMatrix:
    """Sound bounds on act'(x) for x in ``pre``.

    ReLU and softplus have monotone derivatives (endpoint evaluation).
    Sigmoid and tanh derivatives are unimodal with their peak at 0.
    """
    lo, hi = pre.lower, pre.upper
    if act == "relu":
        return IntervalMatrix(Tensor(lo.data > 0), Tensor(hi.data > 0), check=False)
    if act == "identity":
        return IntervalMatrix.point(Tensor(np.ones(lo.shape)))
    if act == "softplus":
        if pre.is_point:
            return IntervalMatrix.point(T.sigmoid(lo))
        return IntervalMatrix(T.sigmoid(lo), T.sigmoid(hi), check=False)
    if act in ("sigmoid", "tanh"):
        dl = _peaked_derivative(act, lo)
        if pre.is_point:
            return IntervalMatrix.point(dl)
        du = _peaked_derivative(act, hi)
        peak = 0.25 if act == "sigmoid" else 1.0
        straddle = (lo.data <= 0) & (hi.data >= 0)
        upper = T.maximum(dl, du) * Tensor(~straddle) + Tensor(np.where(straddle, peak, 0.0))
        return IntervalMatrix(T.minimum(dl, du), upper, check=False)
    raise ContractError(f"unknown activation {act!r}")


def softmax_bounds(logits: IntervalMatrix) -> IntervalMatrix:
    """Per-class bounds on softmax over a logit box (rows are examples)."""
    if len(logits.shape) != 2:
        raise DimensionError(f"softmax bounds expect (N, m) logits, got {logits.shape}")
    if logits.is_point:
        return IntervalMatrix.point(T.softmax_share(logits.lower, logits.lower))
    return IntervalMatrix(
        T.softmax_share(logits.lower, logits.upper), T.softmax_share(logits.upper, logits.lower), check=False
    )


def loss_gradient_seed_bounds(loss: LossKind, logits: IntervalMatrix) -> IntervalMatrix:
    """Interval on dL/dz at the logits."""
    n, m = logits.shape
    if isinstance(loss, CrossEntropy):
        hot = Tensor(_onehot(_class_rows(loss.label, n, m), m))
        sm = softmax_bounds(logits)
        if sm.is_point:
            return IntervalMatrix.point(sm.lower - hot)
        return IntervalMatrix(sm.lower - hot, sm.upper - hot, check=False)
    if isinstance(loss, ClassLogit):
        return IntervalMatrix.point(Tensor(_onehot(_class_rows(loss.cls, n, m), m)))
    if isinstance(loss, SquaredError):
        y = Tensor(np.broadcast_to(np.asarray(loss.target, dtype=np.float64), (n, m)))
        if logits.is_point:
            return IntervalMatrix.point(T.scale(logits.lower - y, 2.0))
        return IntervalMatrix(T.scale(logits.lower - y, 2.0), T.scale(logits.upper - y, 2.0), check=False)
    raise ContractError(f"unknown loss {loss!r}")


# ---------------------------------------------------------------------------
# regions


class InputRegion:
    """Box ``[x - eps, x + eps]`` intersected with optional domain bounds.

    ``center`` is one example or an ``(N, ...)`` batch; ``eps``, ``lo`` and
    ``hi`` are scalars or per-feature arrays.
    """

    def __init__(self, center, eps=0.0, lo=None, hi=None):
        self.center = np.asarray(center, dtype=np.float64)
        self.eps = np.asarray(eps, dtype=np.float64)
        if np.any(self.eps < 0) or not np.all(np.isfinite(self.eps)):
            raise ContractError("eps must be finite and non-negative")
        self.lo = None if lo is None else np.asarray(lo, dtype=np.float64)
        self.hi = None if hi is None else np.asarray(hi, dtype=np.float64)

    def bounds(self, net: Network | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Realised (lower, upper) arrays, batched to ``(N, n)`` when ``net`` is given."""
        x = self.center
        if net is not None:
            x, _ = as_batch(net, x)
        eps = self.eps.reshape(-1) if self.eps.ndim and net is not None else self.eps
        lower, upper = np.subtract(x, eps), np.add(x, eps)
        if self.lo is not None:
            np.maximum(lower, self.lo.reshape(-1) if self.lo.ndim and net is not None else self.lo, out=lower)
        if self.hi is not None:
            np.minimum(upper, self.hi.reshape(-1) if self.hi.ndim and net is not None else self.hi, out=upper)
        if not np.all(lower <= upper):
            raise ContractError("input region is empty after clipping to the domain")
        return lower, upper

    def interval(self, net: Network) -> IntervalMatrix:
        # center and radius built in place over the two endpoint buffers
        center, radius = self.bounds(net)
        radius -= center
        if not np.any(radius):
            return IntervalMatrix.point(Tensor._wrap(center))
        radius *= 0.5
        center += radius
        out = IntervalMatrix.from_center_radius(Tensor._wrap(center), Tensor._wrap(radius), check=False)
        out._point = False
        return out

    def project(self, x, net: Network | None = None) -> np.ndarray:
        lower, upper = self.bounds(net)
        return np.clip(np.asarray(x, dtype=np.float64).reshape(lower.shape), lower, upper)


class ModelRegion:
    """Per-parameter box ``[w - gamma*|w|, w + gamma*|w|]``.

    ``gamma`` is a scalar or one value per affine layer.
    """

    def __init__(self, gamma=0.0):
        g = np.asarray(gamma, dtype=np.float64)
        if np.any(g < 0) or not np.all(np.isfinite(g)):
            raise ContractError("gamma must be finite and non-negative")
        self.gamma = g

    def layer_gamma(self, affine_index: int) -> float:
        if self.gamma.ndim == 0:
            return float(self.gamma)
        if affine_index >= self.gamma.size:
            raise DimensionError(f"gamma has {self.gamma.size} entries, layer {affine_index} requested")
        return float(self.gamma[affine_index])

    def interval(self, param: Tensor, affine_index: int) -> IntervalMatrix:
        g = self.layer_gamma(affine_index)
        if g == 0.0:
            return IntervalMatrix.point(param)
        return IntervalMatrix.relative(param, T.abs(param), g)

    def bounds(self, param, affine_index: int) -> tuple[np.ndarray, np.ndarray]:
        p = np.asarray(param, dtype=np.float64)
        r = self.layer_gamma(affine_index) * np.abs(p)
        return p - r, p + r

    @property
    def is_zero(self) -> bool:
        return bool(np.all(self.gamma == 0))


# ---------------------------------------------------------------------------
# layer propagation


def _transpose(iv: IntervalMatrix) -> IntervalMatrix:
    if iv.is_point:
        return IntervalMatrix.point(T.transpose(iv.lower))
    if iv._rel is not None:
        return IntervalMatrix.relative(T.transpose(iv._center), T.transpose(iv._abs_center), iv._rel)
    if iv._lower is None:
        return IntervalMatrix.from_center_radius(T.transpose(iv._center), T.transpose(iv._radius), check=False)
    return IntervalMatrix(T.transpose(iv.lower), T.transpose(iv.upper), check=False)


def _map(iv: IntervalMatrix, fn) -> IntervalMatrix:
    """Apply an exact, order-preserving linear rearrangement to both endpoints."""
    if iv.is_point:
        return IntervalMatrix.point(fn(iv.lower))
    return IntervalMatrix(fn(iv.lower), fn(iv.upper), check=False)


def _matmul(a: IntervalMatrix, b: IntervalMatrix, mode: str) -> IntervalMatrix:
    if mode == "center-radius":
        return interval_matmul(a, b)
    if mode == "corners":
        if a.is_point and b.is_point:
            return interval_matmul(a, b)
        return interval_matmul_exact_corners(a, b)
    raise ContractError(f"unknown interval matmul mode {mode!r}; use one of {MATMUL_MODES}")


def _add_bias(iv: IntervalMatrix, bias: IntervalMatrix) -> IntervalMatrix:
    if iv.is_point and bias.is_point:
        return IntervalMatrix.point(T.add_bias(iv.lower, bias.lower))
    return IntervalMatrix(T.add_bias(iv.lower, bias.lower), T.add_bias(iv.upper, bias.upper), check=False)


def affine_bounds(layer: LayerSpec, z: IntervalMatrix, w: IntervalMatrix, b: IntervalMatrix, mode: str) -> IntervalMatrix:
    """Enclosure of ``rows @ W.T + b`` (im2col for convolutions)."""
    if not isinstance(layer.kind, Conv2D):
        return _add_bias(_matmul(z, _transpose(w), mode), b)
    idx, (f, ho, wo) = conv_index(layer.in_shape, layer.kind)
    n, p = z.shape[0], idx.shape[0]
    patches = _map(z, lambda t: T.reshape(T.gather_cols(t, idx), (n * p, idx.shape[1])))
    out = _add_bias(_matmul(patches, _transpose(w), mode), b)
    return _map(out, lambda t: T.reshape(T.transpose(T.reshape(t, (n, p, f)), (0, 2, 1)), (n, f * ho * wo)))


def affine_transpose_bounds(layer: LayerSpec, e: IntervalMatrix, w: IntervalMatrix, mode: str) -> IntervalMatrix:
    """Enclosure of ``e @ W`` (scatter back through im2col for convolutions)."""
    if not isinstance(layer.kind, Conv2D):
        return _matmul(e, w, mode)
    idx, (f, ho, wo) = conv_index(layer.in_shape, layer.kind)
    n, p = e.shape[0], idx.shape[0]
    rows = _map(e, lambda t: T.reshape(T.transpose(T.reshape(t, (n, f, p)), (0, 2, 1)), (n * p, f)))
    cols = _matmul(rows, w, mode)
    return _map(cols, lambda t: T.scatter_cols(T.reshape(t, (n, p, idx.shape[1])), idx, layer.in_size))


@dataclass
class ForwardBounds:
    """Per-layer ``(pre_activation, activation)`` intervals plus the weight boxes used."""

    input: IntervalMatrix
    layers: list
    weights: list
    single: bool = False

    @property
    def logits(self) -> IntervalMatrix:
        return self.layers[-1][1]


def forward_bounds(net: Network, region: InputRegion, model: ModelRegion | None = None, matmul: str = "center-radius") -> ForwardBounds:
    """Propagate the input box and parameter box through every layer."""
    model = model or ModelRegion(0.0)
    _, single = as_batch(net, region.center)
    z = x_box = region.interval(net)
    caches, weights, k = [], [], 0
    for layer in net.layers:
        if layer.is_affine:
            w, b = model.interval(layer.weight, k), model.interval(layer.bias, k)
            k += 1
            pre = affine_bounds(layer, z, w, b, matmul)
            weights.append(w)
        else:
            pre = z
            weights.append(None)
        z = activation_bounds(layer.activation, pre)
        caches.append((pre, z))
    return ForwardBounds(x_box, caches, weights, single)


class GradientBox:
    """Box ``[v_lower, v_upper]`` enclosing every reachable input gradient."""

    __slots__ = ("lower_t", "upper_t")

    def __init__(self, lower, upper):
        self.lower_t, self.upper_t = T.as_tensor(lower), T.as_tensor(upper)
        if self.lower_t.shape != self.upper_t.shape:
            raise DimensionError("gradient box endpoints differ in shape")

    @property
    def v_lower(self) -> np.ndarray:
        return self.lower_t.data

    @property
    def v_upper(self) -> np.ndarray:
        return self.upper_t.data

    @property
    def delta(self) -> np.ndarray:
        return self.upper_t.data - self.lower_t.data

    @property
    def delta_tensor(self) -> Tensor:
        """Width as a recorded tensor (differentiable w.r.t. watched parameters)."""
        return self.upper_t - self.lower_t

    @property
    def shape(self) -> tuple:
        return self.lower_t.shape

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.v_lower + self.v_upper)

    def contains(self, v, slack: float = 0.0) -> np.ndarray:
        """Elementwise membership of one explanation or a stack of them."""
        v = np.asarray(v, dtype=np.float64)
        v = v.reshape(self.shape) if v.size == self.v_lower.size else v.reshape((-1,) + self.shape)
        return (v >= self.v_lower - slack) & (v <= self.v_upper + slack)

    def row(self, i: int) -> "GradientBox":
        return GradientBox(Tensor(self.v_lower[i]), Tensor(self.v_upper[i]))

    def __len__(self) -> int:
        return self.shape[0]


def backward_bounds(
    net: Network, fwd: ForwardBounds, seed: IntervalMatrix, model: ModelRegion | None = None, matmul: str = "center-radius"
) -> GradientBox:
    """Push the seed interval back to the input.

    Per affine layer: e = act'(pre) (.) d (exact hadamard), then d = e @ W.
    """
    d = seed
    for layer, (pre, _), w in zip(reversed(net.layers), reversed(fwd.layers), reversed(fwd.weights)):
        if not layer.is_affine:
            continue
        e = interval_hadamard(activation_derivative_bounds(layer.activation, pre), d)
        d = affine_transpose_bounds(layer, e, w, matmul)
    return GradientBox(d.lower, d.upper)


def explanation_bounds(
    net: Network,
    x,
    eps=0.0,
    gamma=0.0,
    loss: LossKind = ClassLogit(0),
    domain: tuple | None = None,
    matmul: str = "center-radius",
) -> GradientBox:
    """Gradient box for inputs ``x`` (one example or a batch).

    ``domain`` is an optional ``(lo, hi)`` pair of scalars or per-feature
    arrays. A single example gives 1-d ``v_lower``/``v_upper``; a batch gives
    ``(N, n)``.
    """
    lo, hi = domain if domain is not None else (None, None)
    region = InputRegion(x, eps, lo, hi)
    model = gamma if isinstance(gamma, ModelRegion) else ModelRegion(gamma)
    fwd = forward_bounds(net, region, model, matmul)
    seed = loss_gradient_seed_bounds(loss, fwd.logits)
    box = backward_bounds(net, fwd, seed, model, matmul)
    if fwd.single:
        return GradientBox(T.reshape(box.lower_t, (net.input_size,)), T.reshape(box.upper_t, (net.input_size,)))
    return box


def logit_bounds_margin(fwd_or_logits, true_class) -> np.ndarray | bool:
    """True where the lower bound of the true logit beats every other upper bound."""
    logits = fwd_or_logits.logits if isinstance(fwd_or_logits, ForwardBounds) else fwd_or_logits
    lo = np.atleast_2d(np.asarray(logits.lower.data))
    hi = np.atleast_2d(np.asarray(logits.upper.data))
    n, m = lo.shape
    c = _class_rows(true_class, n, m)
    others = hi.copy()
    others[np.arange(n), c] = -np.inf
    ok = lo[np.arange(n), c] > others.max(axis=1)
    single = isinstance(fwd_or_logits, ForwardBounds) and fwd_or_logits.single
    return bool(ok[0]) if single or (not isinstance(fwd_or_logits, ForwardBounds) and np.ndim(logits.lower.data) == 1) else ok


def certify_prediction(net: Network, region: InputRegion, model: ModelRegion | None, true_class, matmul: str = "center-radius"):
    """Convenience: forward bounds followed by the logit margin check."""
    return logit_bounds_margin(forward_bounds(net, region, model, matmul), true_class)
