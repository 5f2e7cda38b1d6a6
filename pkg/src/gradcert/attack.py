"""Projected sign-gradient attacks on explanations.

The attacked quantity is the input gradient of a loss. A targeted attack
minimises ``mse(v, v_targ)``; an untargeted attack maximises
``mse(v, v_clean)``. Both are written as minimisation of an objective ``g``.

Gradients of ``g`` need second-order information. Two estimators exist:

* ``"fd"``: central finite differences, all coordinates evaluated in one
  batched pass (input attacks) or in chunks of stacked parameter vectors
  (model attacks on dense networks; one coordinate at a time otherwise);
* ``"double"``: differentiate an explicitly unrolled gradient computation on
  the tensor engine. ReLU masks enter as constants there, so this path sees
  only the local linear piece.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .certify import TargetSpec
from .errors import ContractError
from .intervals import InputRegion, ModelRegion
from .network import (
    Dense,
    LossKind,
    Network,
    act_derivative_np,
    act_np,
    as_batch,
    input_gradient,
    input_gradient_tensor,
    loss_seed,
)
from .tensor import Tensor

MODES = ("targeted-input", "untargeted-input", "targeted-model", "untargeted-model")
ESTIMATORS = ("fd", "double")


@dataclass(frozen=True)
class AttackConfig:
    mode: str = "untargeted-input"
    steps: int = 100
    step_size: float | None = None  # None: 2.5 * region radius / steps, per coordinate
    restarts: int = 1  # random starts in addition to the clean start
    estimator: str = "fd"
    h_fd: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"unknown attack mode {self.mode!r}")
        if self.estimator not in ESTIMATORS:
            raise ContractError(f"unknown gradient estimator {self.estimator!r}")
        if self.steps < 0 or self.restarts < 0:
            raise ContractError("steps and restarts must be non-negative")
        if self.step_size is not None and self.step_size <= 0:
            raise ContractError("step_size must be positive")
        if self.h_fd <= 0:
            raise ContractError("h_fd must be positive")

    @property
    def targeted(self) -> bool:
        return self.mode.startswith("targeted")


@dataclass
class AttackResult:
    point: object  # adversarial input (flat) or parameter list
    v_adv: np.ndarray
    objective: float  # best value of the minimised objective
    score: float  # mse to the target (targeted) or to the clean explanation (untargeted)
    success: bool
    trace: list = field(default_factory=list)


def _score_fn(cfg: AttackConfig, spec: TargetSpec, v_clean: np.ndarray):
    """Returns (objective, score) callables over explanation rows."""
    if cfg.targeted:
        t = np.asarray(spec.v_targ, dtype=np.float64).reshape(-1)

        def score(v):
            return np.mean((v - t) ** 2, axis=-1)

        return score, score
    c = v_clean.reshape(-1)

    def score(v):
        return np.mean((v - c) ** 2, axis=-1)

    return (lambda v: -score(v)), score


def _success(cfg: AttackConfig, spec: TargetSpec, score: float) -> bool:
    return bool(score <= spec.tau) if cfg.targeted else bool(score > spec.tau)


def _objective_tensor(cfg: AttackConfig, spec: TargetSpec, v_clean: np.ndarray, v: Tensor) -> Tensor:
    ref = spec.v_targ if cfg.targeted else v_clean
    diff = v - Tensor(np.asarray(ref, dtype=np.float64).reshape(v.shape))
    val = T.mean(diff * diff)
    return val if cfg.targeted else -val


def _pgd(start_points, project, objective, grad, step, steps, check):
    """Sign-gradient descent from each start; returns best (value, point, trace)."""
    best_val, best_pt, trace = np.inf, None, []
    for start in start_points:
        p = project(start)
        check(p)
        val = objective(p)
        trace.append(val)
        if val < best_val:
            best_val, best_pt = val, p
        for _ in range(steps):
            p = project(p - step * np.sign(grad(p)))
            check(p)
            val = objective(p)
            trace.append(val)
            if val < best_val:
                best_val, best_pt = val, p
    return best_val, best_pt, trace


def input_attack(
    net: Network, x, region: InputRegion, loss: LossKind, spec: TargetSpec, cfg: AttackConfig
) -> AttackResult:
    """PGD over inputs inside ``region`` for a single example ``x``."""
    if cfg.mode not in ("targeted-input", "untargeted-input"):
        raise ContractError(f"input_attack needs an input mode, got {cfg.mode!r}")
    xb, _ = as_batch(net, x)
    if xb.shape[0] != 1:
        raise ContractError("input_attack works on one example at a time")
    x0 = xb[0]
    lo, hi = (b[0] for b in region.bounds(net))
    v_clean = input_gradient(net, xb, loss)[0]
    obj_rows, score_rows = _score_fn(cfg, spec, v_clean)

    def explain(points):
        return input_gradient(net, np.atleast_2d(points), loss)

    def objective(p):
        return float(obj_rows(explain(p)[0]))

    n = x0.size
    h = cfg.h_fd

    def grad_fd(p):
        eye = np.eye(n) * h
        pts = np.concatenate([p + eye, p - eye])
        vals = obj_rows(explain(pts))
        return (vals[:n] - vals[n:]) / (2 * h)

    def grad_double(p):
        with T.DiffGraph() as g:
            xt = g.watch(Tensor(p.reshape(1, n)))
            val = _objective_tensor(cfg, spec, v_clean, input_gradient_tensor(net, xt, loss))
        return g.backward(val)[xt].data.reshape(n)

    def check(p):
        if np.any(p < lo) or np.any(p > hi):
            raise AssertionError("attack iterate left the input region")

    radius = 0.5 * (hi - lo)
    if not np.any(radius > 0):
        v = v_clean
        s = float(score_rows(v))
        return AttackResult(x0.copy(), v, objective(x0), s, _success(cfg, spec, s), [objective(x0)])
    step = cfg.step_size if cfg.step_size is not None else 2.5 * radius / max(cfg.steps, 1)
    rng = np.random.default_rng(cfg.seed)
    starts = [x0] + [rng.uniform(lo, hi) for _ in range(cfg.restarts)]
    grad = grad_fd if cfg.estimator == "fd" else grad_double
    best_val, best_pt, trace = _pgd(starts, lambda p: np.clip(p, lo, hi), objective, grad, step, cfg.steps, check)
    v = explain(best_pt)[0]
    s = float(score_rows(v))
    return AttackResult(best_pt, v, best_val, s, _success(cfg, spec, s), trace)


def _stackable(net: Network) -> bool:
    return all(isinstance(layer.kind, Dense) or (not layer.is_affine and layer.activation == "identity") for layer in net.layers)


def stacked_input_gradients(net: Network, params: list, x: np.ndarray, loss: LossKind) -> np.ndarray:
    """Input gradients at one input ``x`` for K parameter sets at once.

    ``params`` holds ``[W1, b1, ...]`` with a leading K axis. Dense and
    flatten layers only.
    """
    if not _stackable(net):
        raise ContractError("stacked_input_gradients supports dense and flatten layers only")
    k = params[0].shape[0]
    z = np.broadcast_to(np.asarray(x, dtype=np.float64).reshape(1, -1), (k, net.input_size))
    layers = [layer for layer in net.layers if layer.is_affine]
    pres, weights, it = [], [], iter(params)
    for layer in layers:
        w, b = next(it), next(it)
        pre = np.einsum("ki,koi->ko", z, w) + b
        pres.append(pre)
        weights.append(w)
        z = act_np(layer.activation, pre)
    d = loss_seed(loss, z)
    for layer, pre, w in zip(reversed(layers), reversed(pres), reversed(weights)):
        d = np.einsum("ko,koi->ki", act_derivative_np(layer.activation, pre) * d, w)
    return d


def model_attack(
    net: Network, x, region: ModelRegion, loss: LossKind, spec: TargetSpec, cfg: AttackConfig
) -> AttackResult:
    """PGD over parameters inside ``[p - gamma|p|, p + gamma|p|]`` at a fixed input."""
    if cfg.mode not in ("targeted-model", "untargeted-model"):
        raise ContractError(f"model_attack needs a model mode, got {cfg.mode!r}")
    xb, _ = as_batch(net, x)
    if xb.shape[0] != 1:
        raise ContractError("model_attack works on one example at a time")
    params = [p.data for p in net.parameters()]
    shapes = [p.shape for p in params]
    sizes = [p.size for p in params]
    flat0 = np.concatenate([p.ravel() for p in params])
    lo_parts, hi_parts = [], []
    for i, p in enumerate(params):
        lo_i, hi_i = region.bounds(p, i // 2)
        lo_parts.append(lo_i.ravel())
        hi_parts.append(hi_i.ravel())
    lo, hi = np.concatenate(lo_parts), np.concatenate(hi_parts)
    v_clean = input_gradient(net, xb, loss)[0]
    obj_rows, score_rows = _score_fn(cfg, spec, v_clean)

    def unflatten(flat):
        out, at = [], 0
        for shp, sz in zip(shapes, sizes):
            out.append(flat[at : at + sz].reshape(shp))
            at += sz
        return out

    def explain(flat):
        return input_gradient(net.with_parameters(unflatten(flat)), xb, loss)[0]

    def objective(flat):
        return float(obj_rows(explain(flat)))

    h = cfg.h_fd

    dense = _stackable(net)
    chunk = max(1, (1 << 21) // flat0.size)

    def stacked(flats):
        k, at, out = flats.shape[0], 0, []
        for shp, sz in zip(shapes, sizes):
            out.append(flats[:, at : at + sz].reshape((k,) + shp))
            at += sz
        return out

    def grad_fd_stacked(flat):
        free = np.flatnonzero(hi != lo)  # pinned coordinates keep a zero gradient
        out = np.zeros_like(flat)
        for start in range(0, free.size, chunk):
            idx = free[start : start + chunk]
            rows = np.arange(idx.size)
            up = np.tile(flat, (idx.size, 1))
            dn = up.copy()
            up[rows, idx] += h
            dn[rows, idx] -= h
            f_up = obj_rows(stacked_input_gradients(net, stacked(up), xb, loss))
            f_dn = obj_rows(stacked_input_gradients(net, stacked(dn), xb, loss))
            out[idx] = (f_up - f_dn) / (2 * h)
        return out

    def grad_fd(flat):
        if dense:
            return grad_fd_stacked(flat)
        out = np.empty_like(flat)
        for i in range(flat.size):
            if hi[i] == lo[i]:
                out[i] = 0.0  # pinned coordinate: projection discards any step
                continue
            up, dn = flat.copy(), flat.copy()
            up[i] += h
            dn[i] -= h
            out[i] = (objective(up) - objective(dn)) / (2 * h)
        return out

    def grad_double(flat):
        with T.DiffGraph() as g:
            leaves = [g.watch(Tensor(p)) for p in unflatten(flat)]
            v = input_gradient_tensor(net.with_parameters(leaves), Tensor(xb), loss)
            val = _objective_tensor(cfg, spec, v_clean, v)
        return np.concatenate([a.data.ravel() for a in g.gradient(val, leaves)])

    def check(flat):
        if np.any(flat < lo) or np.any(flat > hi):
            raise AssertionError("attack iterate left the model region")

    radius = 0.5 * (hi - lo)
    if not np.any(radius > 0):
        s = float(score_rows(v_clean))
        return AttackResult(unflatten(flat0), v_clean, objective(flat0), s, _success(cfg, spec, s), [objective(flat0)])
    step = cfg.step_size if cfg.step_size is not None else 2.5 * radius / max(cfg.steps, 1)
    rng = np.random.default_rng(cfg.seed)
    starts = [flat0] + [rng.uniform(lo, hi) for _ in range(cfg.restarts)]
    grad = grad_fd if cfg.estimator == "fd" else grad_double
    best_val, best_pt, trace = _pgd(starts, lambda p: np.clip(p, lo, hi), objective, grad, step, cfg.steps, check)
    v = explain(best_pt)
    s = float(score_rows(v))
    return AttackResult(unflatten(best_pt), v, best_val, s, _success(cfg, spec, s), trace)
