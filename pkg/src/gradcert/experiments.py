"""Dataset-level certification and attack evaluation.

Explanations are compared on a per-input relative scale: each input's
explanation (and its gradient box) is divided by the root-mean-square of its
clean explanation, and targets are rescaled to unit root-mean-square. An mse
threshold ``tau`` therefore means "mean squared deviation of ``tau`` relative
to the clean explanation's own magnitude", independent of resolution and of
the network's output scale. Attacks run in raw units with the equivalent
raw target and threshold, so both sides decide the same predicate.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .attack import AttackConfig, input_attack, model_attack
from .certify import (
    TargetSpec,
    certified_top_k_exclusion,
    certify_targeted,
    certify_untargeted,
    corner_mask_targets,
    unit_rms,
)
from .errors import ContractError
from .intervals import InputRegion, ModelRegion, explanation_bounds, forward_bounds, logit_bounds_margin
from .network import ClassLogit, CrossEntropy, Network, input_gradient, predict

SCALING_NOTE = (
    "explanations and gradient boxes are divided by the root-mean-square of the clean explanation; "
    "targets are rescaled to unit root-mean-square; mse thresholds apply on that scale"
)
CERT_MODES = ("untargeted", "targeted", "prediction", "topk")


def explain_loss(kind: str, labels):
    if kind == "true-logit":
        return ClassLogit(labels)
    if kind == "cross-entropy":
        return CrossEntropy(labels)
    raise ContractError(f"unknown explanation loss {kind!r}")


def check_compatible(net: Network, ds) -> None:
    if ds.inputs.shape[1] != net.input_size:
        raise ContractError(f"model expects {net.input_size} input features, dataset has {ds.inputs.shape[1]}")
    if ds.class_count > net.class_count:
        raise ContractError(f"dataset has {ds.class_count} classes, model only {net.class_count}")


def clean_scale(v: np.ndarray) -> np.ndarray:
    """Per-row RMS of the clean explanation (1 where it is exactly zero)."""
    s = np.sqrt(np.mean(v * v, axis=-1))
    return np.where(s > 0, s, 1.0)


def make_targets(spec, input_shape) -> np.ndarray:
    """Unit-RMS target rows from ``{"kind": "corners", "k": 5, "insets": 5}`` or an explicit array."""
    if isinstance(spec, dict):
        if spec.get("kind", "corners") != "corners":
            raise ContractError(f"unknown target kind {spec.get('kind')!r}")
        shape = tuple(input_shape)
        if len(shape) not in (2, 3):
            raise ContractError("corner targets need an image-shaped input")
        return unit_rms(corner_mask_targets(shape, int(spec.get("k", 5)), int(spec.get("insets", 5))))
    return unit_rms(np.atleast_2d(np.asarray(spec, dtype=np.float64)))


@dataclass
class CertifyResult:
    mode: str
    rate: float
    rows: list = field(default_factory=list)
    columns: tuple = ()
    extra: dict = field(default_factory=dict)


def certify_dataset(
    net: Network,
    ds,
    eps: float,
    gamma: float,
    mode: str = "untargeted",
    tau: float = 1.0,
    targets=None,
    explain: str = "cross-entropy",
    matmul: str = "center-radius",
    limit: int | None = None,
    batch: int = 100,
    norm_ratio_tau: float = 2.0,
    sensitive: int | None = None,
    k: int = 5,
) -> CertifyResult:
    """Certify every input of ``ds`` (first ``limit`` rows) under one region."""
    if mode not in CERT_MODES:
        raise ContractError(f"unknown certification mode {mode!r}")
    check_compatible(net, ds)
    x = ds.inputs if limit is None else ds.inputs[:limit]
    y = ds.labels if limit is None else ds.labels[:limit]
    lo, hi = ds.feature_bounds
    model = ModelRegion(gamma)
    t_rows = None
    if mode == "targeted":
        t_rows = make_targets(targets if targets is not None else {"kind": "corners"}, ds.input_shape)
    rows, extra = [], {}
    for s in range(0, x.shape[0], batch):
        xb, yb = x[s : s + batch], y[s : s + batch]
        if mode == "prediction":
            ok = logit_bounds_margin(forward_bounds(net, InputRegion(xb, eps, lo, hi), model, matmul), yb)
            rows.extend([s + i, int(yb[i]), bool(ok[i])] for i in range(len(yb)))
            continue
        loss = explain_loss(explain, yb)
        box = explanation_bounds(net, xb, eps, model, loss, (lo, hi), matmul)
        v = input_gradient(net, xb, loss)
        sc = clean_scale(v)[:, None]
        nbox = (box.v_lower / sc, box.v_upper / sc)
        if mode == "untargeted":
            out = certify_untargeted(nbox, v / sc, tau)
            ratio = out.extra["norm_ratio"]
            for i in range(len(yb)):
                rows.append(
                    [s + i, int(yb[i]), float(out.score[i]), bool(out.certified[i]), float(ratio[i]), bool(ratio[i] <= norm_ratio_tau)]
                )
        elif mode == "targeted":
            for ti, t in enumerate(t_rows):
                out = certify_targeted(nbox, TargetSpec(t, tau))
                rows.extend([s + i, int(yb[i]), ti, float(out.score[i]), bool(out.certified[i])] for i in range(len(yb)))
        else:
            if sensitive is None:
                raise ContractError("top-k certification needs a sensitive feature index")
            ok = certified_top_k_exclusion(nbox, sensitive, k)
            rows.extend([s + i, int(yb[i]), bool(ok[i])] for i in range(len(yb)))
    columns = {
        "untargeted": ("index", "label", "score", "certified", "norm_ratio", "norm_ratio_certified"),
        "targeted": ("index", "label", "target", "score", "certified"),
        "prediction": ("index", "label", "certified"),
        "topk": ("index", "label", "certified"),
    }[mode]
    cert_col = columns.index("certified")
    rate = float(np.mean([r[cert_col] for r in rows])) if rows else float("nan")
    if mode == "untargeted":
        extra["norm_ratio_rate"] = float(np.mean([r[5] for r in rows])) if rows else float("nan")
    if mode == "targeted":
        # pairs are appended target-major within each batch; sort for a stable listing
        rows.sort(key=lambda r: (r[0], r[2]))
    return CertifyResult(mode, rate, rows, columns, extra)


@dataclass
class AttackSummary:
    mode: str
    robustness: float  # fraction of instances the attack failed on
    rows: list = field(default_factory=list)
    columns: tuple = ("index", "label", "target", "score", "success", "certified")
    violations: int = 0  # certified instances the attack broke (must be zero)


def attack_dataset(
    net: Network,
    ds,
    cfg: AttackConfig,
    eps: float = 0.0,
    gamma: float = 0.0,
    tau: float = 1.0,
    targets=None,
    explain: str = "cross-entropy",
    limit: int | None = None,
    matmul: str = "center-radius",
) -> AttackSummary:
    """Attack each input and cross-check against the certificate for the same instance."""
    check_compatible(net, ds)
    x = ds.inputs if limit is None else ds.inputs[:limit]
    y = ds.labels if limit is None else ds.labels[:limit]
    lo, hi = ds.feature_bounds
    targeted = cfg.targeted
    on_model = cfg.mode.endswith("model")
    t_rows = make_targets(targets if targets is not None else {"kind": "corners"}, ds.input_shape) if targeted else [None]
    cert = certify_dataset(
        net,
        replace(ds, inputs=x, labels=y, groups=None),
        0.0 if on_model else eps,
        gamma if on_model else 0.0,
        "targeted" if targeted else "untargeted",
        tau,
        t_rows if targeted else None,
        explain,
        matmul,
    )
    certified = {(r[0], r[2] if targeted else 0): r[-1] if targeted else r[3] for r in cert.rows}
    rows, violations = [], 0
    for i in range(x.shape[0]):
        loss = explain_loss(explain, int(y[i]))
        v = input_gradient(net, x[i : i + 1], loss)[0]
        s = float(clean_scale(v[None])[0])
        for ti, t in enumerate(t_rows):
            spec = TargetSpec(np.zeros_like(v) if t is None else s * t, tau * s * s)
            if on_model:
                res = model_attack(net, x[i], ModelRegion(gamma), loss, spec, cfg)
            else:
                res = input_attack(net, x[i], InputRegion(x[i], eps, lo, hi), loss, spec, cfg)
            cflag = bool(certified[(i, ti if targeted else 0)])
            if res.success and cflag:
                violations += 1
            rows.append([i, int(y[i]), ti if targeted else -1, res.score / (s * s), bool(res.success), cflag])
    robustness = 1.0 - float(np.mean([r[4] for r in rows])) if rows else float("nan")
    return AttackSummary(cfg.mode, robustness, rows, violations=violations)


def accuracy(net: Network, ds, limit: int | None = None) -> float:
    x = ds.inputs if limit is None else ds.inputs[:limit]
    y = ds.labels if limit is None else ds.labels[:limit]
    return float(np.mean(predict(net, x) == y)) if len(y) else float("nan")


def mean_bias_score(net: Network, ds, j: int, explain: str = "cross-entropy", limit: int | None = None) -> float:
    from .certify import bias_score

    x = ds.inputs if limit is None else ds.inputs[:limit]
    y = ds.labels if limit is None else ds.labels[:limit]
    v = input_gradient(net, x, explain_loss(explain, y))
    return float(np.mean(bias_score(v, j)))


def margin_gradient(net: Network, x: np.ndarray) -> np.ndarray:
    """Input gradient of the class-1 minus class-0 logit margin."""
    return input_gradient(net, x, ClassLogit(1)) - input_gradient(net, x, ClassLogit(0))


def gradient_dispersion(net: Network, grid_n: int = 32, lo: float = 0.0, hi: float = 1.0) -> float:
    """Largest distance of a margin gradient from the mean margin gradient over a 2-d grid.

    Zero exactly when the decision function is affine on the grid.
    """
    if net.input_size != 2:
        raise ContractError("gradient dispersion is defined for two-feature inputs")
    g = np.linspace(lo, hi, grid_n)
    grid = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
    v = margin_gradient(net, grid)
    return float(np.linalg.norm(v - v.mean(axis=0), axis=1).max())
