"""Training with an explanation-robustness regularizer and baseline objectives.

All objectives are built as recorded tensor expressions over watched
parameters, so one backward pass gives the parameter gradient.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Union

import numpy as np

from . import tensor as T
from .errors import ContractError, TrainingDiverged
from .intervals import explanation_bounds
from .network import ClassLogit, CrossEntropy, Network, forward_tensor, input_gradient_tensor, loss_tensor, predict
from .tensor import Tensor


@dataclass(frozen=True)
class NoRegularizer:
    pass


@dataclass(frozen=True)
class GradCert:
    """Loss + alpha * (total width of the certified gradient box)."""

    alpha: float = 0.5
    eps: float = 0.0
    gamma: float = 0.0


@dataclass(frozen=True)
class L2Noise:
    """Loss + alpha * squared norm of the input gradient at a Gaussian-jittered input."""

    alpha: float = 0.5
    eps: float = 0.0


@dataclass(frozen=True)
class GNorm:
    """Loss + alpha * max over the input box of the l1 gradient change."""

    alpha: float = 0.5
    eps: float = 0.0
    inner_steps: int = 10


@dataclass(frozen=True)
class GSumNorm:
    """max over the input box of [loss + alpha * l1 gradient change]."""

    alpha: float = 0.5
    eps: float = 0.0
    inner_steps: int = 10


@dataclass(frozen=True)
class PGDAdv:
    """max over the input box of the loss."""

    eps: float = 0.0
    inner_steps: int = 10


Regularizer = Union[NoRegularizer, GradCert, L2Noise, GNorm, GSumNorm, PGDAdv]
REGULARIZERS = {
    "none": NoRegularizer,
    "gradcert": GradCert,
    "l2noise": L2Noise,
    "gnorm": GNorm,
    "gsumnorm": GSumNorm,
    "pgdadv": PGDAdv,
}


@dataclass(frozen=True)
class SGD:
    lr: float = 0.01
    momentum: float = 0.0


@dataclass(frozen=True)
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


EXPLAIN_LOSSES = ("cross-entropy", "true-logit")


def explanation_loss(kind: str, labels):
    """Loss whose input gradient is the regularised explanation."""
    return ClassLogit(labels) if kind == "true-logit" else CrossEntropy(labels)


@dataclass(frozen=True)
class TrainConfig:
    regularizer: Regularizer = NoRegularizer()
    optimizer: Union[SGD, Adam] = Adam()
    epochs: int = 10
    batch_size: int = 64
    ramp: float | None = 0.5  # fraction of epochs for the linear warm-up; None disables
    seed: int = 0
    probe_eps: float | None = None  # defaults to the regularizer's eps
    probe_gamma: float | None = None
    explain: str = "cross-entropy"  # loss whose input gradient is regularised

    def __post_init__(self):
        if self.explain not in EXPLAIN_LOSSES:
            raise ContractError(f"unknown explanation loss {self.explain!r}; use one of {EXPLAIN_LOSSES}")
        r = self.regularizer
        if getattr(r, "alpha", 0.0) < 0 or getattr(r, "eps", 0.0) < 0 or getattr(r, "gamma", 0.0) < 0:
            raise ContractError("alpha, eps and gamma must be non-negative")
        if self.ramp is not None and not 0 < self.ramp <= 1:
            raise ContractError("ramp fraction must lie in (0, 1]")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ContractError("epochs must be >= 0 and batch_size > 0")

    def to_dict(self) -> dict:
        reg = {"kind": next(k for k, v in REGULARIZERS.items() if isinstance(self.regularizer, v))}
        reg.update(asdict(self.regularizer))
        opt = {"kind": type(self.optimizer).__name__.lower()}
        opt.update(asdict(self.optimizer))
        return {
            "regularizer": reg,
            "optimizer": opt,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "ramp": self.ramp,
            "seed": self.seed,
            "probe_eps": self.probe_eps,
            "probe_gamma": self.probe_gamma,
            "explain": self.explain,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        reg = dict(d.get("regularizer", {"kind": "none"}))
        kind = reg.pop("kind", "none")
        if kind not in REGULARIZERS:
            raise ContractError(f"unknown regularizer {kind!r}")
        opt = dict(d.get("optimizer", {"kind": "adam"}))
        okind = opt.pop("kind", "adam")
        if okind not in ("adam", "sgd"):
            raise ContractError(f"unknown optimizer {okind!r}")
        try:
            return cls(
                regularizer=REGULARIZERS[kind](**reg),
                optimizer=(Adam if okind == "adam" else SGD)(**opt),
                epochs=int(d.get("epochs", 10)),
                batch_size=int(d.get("batch_size", 64)),
                ramp=d.get("ramp", 0.5),
                seed=int(d.get("seed", 0)),
                probe_eps=d.get("probe_eps"),
                probe_gamma=d.get("probe_gamma"),
                explain=d.get("explain", "cross-entropy"),
            )
        except TypeError as exc:
            raise ContractError(f"bad training config: {exc}") from exc


@dataclass
class TrainReport:
    epoch: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    regularizer: list = field(default_factory=list)
    test_accuracy: list = field(default_factory=list)
    probe_delta: list = field(default_factory=list)

    COLUMNS = ("epoch", "train_loss", "regularizer", "test_accuracy", "probe_delta")

    def rows(self) -> list:
        return [list(r) for r in zip(*(getattr(self, c) for c in self.COLUMNS))]

    def to_dict(self) -> dict:
        return {c: list(getattr(self, c)) for c in self.COLUMNS}


# ---------------------------------------------------------------------------
# objectives


def grad_cert_regularizer(net: Network, x, eps, gamma, loss, domain=None) -> Tensor:
    """Mean over rows of the summed gradient-box width (a recorded scalar)."""
    box = explanation_bounds(net, np.atleast_2d(np.asarray(x, dtype=np.float64)), eps, gamma, loss, domain)
    per_row = T.sum(box.delta_tensor, axis=1)
    return T.mean(per_row)


def _clip_domain(x: np.ndarray, domain) -> np.ndarray:
    if domain is None:
        return x
    return np.clip(x, domain[0], domain[1])


def _box(x, eps, domain):
    lo, hi = x - eps, x + eps
    if domain is not None:
        lo, hi = np.maximum(lo, domain[0]), np.minimum(hi, domain[1])
    return lo, hi


def _frozen(net: Network) -> Network:
    """Copy of ``net`` whose parameters are untracked (for inner maximisation)."""
    return net.with_parameters([Tensor(p.data) for p in net.parameters()])


def _inner_maximise(net: Network, x, y, eps, steps, value_rows, domain, rng) -> np.ndarray:
    """Sign-gradient ascent on a per-row objective inside the clipped eps box.

    Returns the best iterate per row, the clean point included.
    """
    lo, hi = _box(x, eps, domain)
    if not np.any(hi > lo):
        return x.copy()
    frozen = _frozen(net)

    def evaluate(xc, need_grad):
        with T.DiffGraph() as g:
            xt = g.watch(Tensor(xc))
            rows = value_rows(frozen, xt)
            total = T.sum(rows)
        vals = np.asarray(rows.data, dtype=np.float64).reshape(len(xc), -1).sum(axis=1)
        return vals, (g.backward(total)[xt].data if need_grad else None)

    best, best_val = x.copy(), evaluate(x, False)[0]
    xp = np.clip(x + rng.uniform(-eps, eps, size=x.shape), lo, hi)
    step = 2.5 * eps / max(steps, 1)
    for k in range(steps + 1):
        vals, grad = evaluate(xp, k < steps)
        better = vals > best_val
        best[better], best_val[better] = xp[better], vals[better]
        if grad is not None:
            xp = np.clip(xp + step * np.sign(grad), lo, hi)
    return best


def composite_loss(net: Network, x, y, cfg: TrainConfig, rng=None, scale: float = 1.0, domain=None) -> tuple:
    """Batch objective. Returns ``(total, task_loss, regularizer)`` tensors.

    ``scale`` multiplies eps/gamma (warm-up); parameters of ``net`` should be
    watched by the active graph for the result to be differentiable.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    reg = cfg.regularizer
    ce = CrossEntropy(y)
    logits, _ = forward_tensor(net, Tensor(x))
    task = T.mean(loss_tensor(ce, logits))
    zero = Tensor(0.0)
    alpha = getattr(reg, "alpha", 1.0)
    if isinstance(reg, NoRegularizer) or alpha == 0.0:
        return task, task, zero
    eps = reg.eps * scale

    if isinstance(reg, GradCert):
        d = grad_cert_regularizer(net, x, eps, reg.gamma * scale, explanation_loss(cfg.explain, y), domain)
        return task + T.scale(d, alpha), task, d

    if isinstance(reg, L2Noise):
        xn = _clip_domain(x + rng.normal(0.0, 1.0, size=x.shape) * eps, domain)
        v = input_gradient_tensor(net, Tensor(xn), ce)
        d = T.mean(T.sum(v * v, axis=1))
        return task + T.scale(d, alpha), task, d

    if isinstance(reg, PGDAdv):
        def value(m, xt):
            out, _ = forward_tensor(m, xt)
            return loss_tensor(ce, out)

        xa = _inner_maximise(net, x, y, eps, reg.inner_steps, value, domain, rng)
        out, _ = forward_tensor(net, Tensor(xa))
        adv = T.mean(loss_tensor(ce, out))
        return adv, task, adv - task

    if isinstance(reg, (GNorm, GSumNorm)):
        v_clean = input_gradient_tensor(_frozen(net), Tensor(x), ce).data
        with_loss = isinstance(reg, GSumNorm)

        def value(m, xt):
            diff = T.sum(T.abs(input_gradient_tensor(m, xt, ce) - Tensor(v_clean)), axis=1)
            if not with_loss:
                return diff
            out, _ = forward_tensor(m, xt)
            return loss_tensor(ce, out) + T.scale(diff, alpha)

        xa = _inner_maximise(net, x, y, eps, reg.inner_steps, value, domain, rng)
        v_at_x = input_gradient_tensor(net, Tensor(x), ce)
        v_at_xa = input_gradient_tensor(net, Tensor(xa), ce)
        gap = T.mean(T.sum(T.abs(v_at_xa - v_at_x), axis=1))
        if with_loss:
            out, _ = forward_tensor(net, Tensor(xa))
            total = T.mean(loss_tensor(ce, out)) + T.scale(gap, alpha)
            return total, task, gap
        return task + T.scale(gap, alpha), task, gap

    raise ContractError(f"unknown regularizer {reg!r}")


# ---------------------------------------------------------------------------
# optimisation


class _Optimizer:
    def __init__(self, spec, params: list):
        self.spec = spec
        self.t = 0
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]

    def step(self, params: list, grads: list) -> list:
        s, self.t = self.spec, self.t + 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            if isinstance(s, Adam):
                self.m[i] = s.beta1 * self.m[i] + (1 - s.beta1) * g
                self.v[i] = s.beta2 * self.v[i] + (1 - s.beta2) * g * g
                mh = self.m[i] / (1 - s.beta1**self.t)
                vh = self.v[i] / (1 - s.beta2**self.t)
                out.append(p - s.lr * mh / (np.sqrt(vh) + s.eps))
            else:
                self.m[i] = s.momentum * self.m[i] + g
                out.append(p - s.lr * self.m[i])
        return out


def probe_delta(
    net: Network, x, eps: float, gamma: float, domain=None, labels=None, batch: int = 256, explain: str = "cross-entropy"
) -> float:
    """Mean over rows of the summed gradient-box width (plain numbers, no recording)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if labels is None:
        labels = predict(net, x)
    total = 0.0
    for s in range(0, x.shape[0], batch):
        rows = np.asarray(labels)[s : s + batch]
        box = explanation_bounds(net, x[s : s + batch], eps, gamma, explanation_loss(explain, rows), domain)
        total += float(box.delta.sum())
    return total / x.shape[0]


def accuracy(net: Network, x, y) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(predict(net, np.atleast_2d(x)) == np.asarray(y)))


def fit(net: Network, train, cfg: TrainConfig, test=None, probe=None, domain=None, log=None):
    """Minibatch training. ``train``/``test`` are ``(x, y)`` pairs or datasets.

    Returns ``(trained_net, TrainReport)``. Raises :class:`TrainingDiverged`
    on a non-finite objective.
    """
    xtr, ytr = _xy(train)
    if xtr.shape[0] == 0:
        raise ContractError("training set is empty")
    if domain is None and hasattr(train, "feature_bounds"):
        domain = train.feature_bounds
    xte, yte = _xy(test) if test is not None else (None, None)
    if probe is None:
        probe = xte[:100] if xte is not None else xtr[:100]
    reg = cfg.regularizer
    peps = cfg.probe_eps if cfg.probe_eps is not None else getattr(reg, "eps", 0.0)
    pgam = cfg.probe_gamma if cfg.probe_gamma is not None else getattr(reg, "gamma", 0.0)

    rng = np.random.default_rng(cfg.seed)
    opt = _Optimizer(cfg.optimizer, net.parameters())
    n = xtr.shape[0]
    steps_per_epoch = -(-n // cfg.batch_size)
    ramp_steps = None if cfg.ramp is None else max(1, int(round(cfg.ramp * cfg.epochs * steps_per_epoch)))
    report = TrainReport()
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        loss_sum = reg_sum = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            scale = 1.0 if ramp_steps is None else min(1.0, step / ramp_steps)
            with T.DiffGraph() as g:
                leaves = [g.watch(Tensor(p.data)) for p in net.parameters()]
                live = net.with_parameters(leaves)
                total, task, regval = composite_loss(live, xtr[idx], ytr[idx], cfg, rng, scale, domain)
            if not np.isfinite(total.item()):
                raise TrainingDiverged(
                    f"non-finite objective at epoch {epoch}, batch {b} (task loss {task.item()!r}, regularizer {regval.item()!r})"
                )
            grads = [a.data for a in g.gradient(total, leaves)]
            net = net.with_parameters(opt.step([p.data for p in net.parameters()], grads))
            loss_sum += task.item() * len(idx)
            reg_sum += regval.item() * len(idx)
            step += 1
        report.epoch.append(epoch + 1)
        report.train_loss.append(loss_sum / n)
        report.regularizer.append(reg_sum / n)
        report.test_accuracy.append(accuracy(net, xte, yte) if xte is not None else float("nan"))
        report.probe_delta.append(probe_delta(net, probe, peps, pgam, domain, explain=cfg.explain))
        if log is not None:
            log(epoch + 1, report)
    return net, report


def _xy(data):
    if hasattr(data, "inputs"):
        return np.asarray(data.inputs, dtype=np.float64), np.asarray(data.labels, dtype=np.intp)
    x, y = data
    return np.atleast_2d(np.asarray(x, dtype=np.float64)), np.asarray(y, dtype=np.intp)
