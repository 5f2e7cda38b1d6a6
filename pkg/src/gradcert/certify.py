"""Certificates over gradient boxes.

Functions accept one explanation (1-d) or a batch (rows); similarity scores
are computed over the last axis, so batched calls return one value per row.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError
from .intervals import GradientBox

SIMILARITIES = ("mse", "cosine")


@dataclass(frozen=True)
class TargetSpec:
    """Attack target: success means ``mse(v_adv, v_targ) <= tau`` (or cosine >= tau)."""

    v_targ: np.ndarray
    tau: float
    similarity: str = "mse"

    def __post_init__(self):
        if self.tau < 0 and self.similarity == "mse":
            raise ContractError("tau must be non-negative for mse")
        if self.similarity not in SIMILARITIES:
            raise ContractError(f"unknown similarity {self.similarity!r}")


@dataclass
class CertificationOutcome:
    certified: object
    witness: np.ndarray | None
    score: object
    mode: str
    extra: dict = field(default_factory=dict)


def _endpoints(box) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(box, GradientBox):
        return box.v_lower, box.v_upper
    lo, hi = box
    return np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


def mse(v, w):
    """Mean squared difference over the last axis."""
    v, w = np.asarray(v, dtype=np.float64), np.asarray(w, dtype=np.float64)
    _same_shape(v, w, "mse")
    out = np.mean((v - w) ** 2, axis=-1)
    return float(out) if out.ndim == 0 else out


def rms(v):
    """Root mean square over the last axis."""
    v = np.asarray(v, dtype=np.float64)
    out = np.sqrt(np.mean(v * v, axis=-1))
    return float(out) if out.ndim == 0 else out


def targeted_witness(box, v_targ) -> np.ndarray:
    """Closest box point to the target: clamp it into the box."""
    lo, hi = _endpoints(box)
    t = np.broadcast_to(np.asarray(v_targ, dtype=np.float64), lo.shape)
    return np.clip(t, lo, hi)


def certify_targeted(box, spec: TargetSpec) -> CertificationOutcome:
    """Certified when even the closest box point misses the target.

    mse: min over the box of mse to the target exceeds tau.
    cosine: an upper bound on cosine similarity to the target stays below tau.
    """
    lo, _ = _endpoints(box)
    t = np.broadcast_to(np.asarray(spec.v_targ, dtype=np.float64), lo.shape)
    if spec.similarity == "mse":
        w = targeted_witness(box, t)
        score = mse(w, t)
        return CertificationOutcome(np.asarray(score) > spec.tau if np.ndim(score) else score > spec.tau, w, score, "targeted")
    score = cosine_similarity_max_bound(box, t)
    certified = np.asarray(score) < spec.tau if np.ndim(score) else score < spec.tau
    return CertificationOutcome(certified, None, score, "targeted")


def untargeted_witness(box, v) -> np.ndarray:
    """Farthest box point from ``v``: per coordinate the farther endpoint (ties go up)."""
    lo, hi = _endpoints(box)
    v = np.asarray(v, dtype=np.float64)
    _same_shape(lo, v, "untargeted witness")
    return np.where(np.abs(hi - v) >= np.abs(v - lo), hi, lo)


def certify_untargeted(box, v, tau: float, similarity: str = "mse") -> CertificationOutcome:
    """Certified when every box point stays within ``tau`` of the clean explanation.

    mse: the farthest point has mse <= tau. cosine: the lower bound on cosine
    similarity to ``v`` is at least ``tau``. The norm ratio of the witness to
    ``v`` is reported in ``extra``.
    """
    v = np.asarray(v, dtype=np.float64)
    if similarity == "mse":
        w = untargeted_witness(box, v)
        score = mse(v, w)
        certified = np.asarray(score) <= tau if np.ndim(score) else score <= tau
        vn = np.linalg.norm(v, axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(vn > 0, np.linalg.norm(w, axis=-1) / np.where(vn > 0, vn, 1.0), np.inf)
        return CertificationOutcome(certified, w, score, "untargeted", {"norm_ratio": ratio})
    if similarity == "cosine":
        score = cosine_similarity_min_bound(box, v)
        certified = np.asarray(score) >= tau if np.ndim(score) else score >= tau
        return CertificationOutcome(certified, None, score, "untargeted")
    raise ContractError(f"unknown similarity {similarity!r}")


def cosine_similarity_min_bound(box, v_targ):
    """Sound lower bound on min over the box of cos(v', v_targ).

    The numerator is bounded below coordinate-wise; the denominator uses the
    largest box norm when that bound is non-negative and the smallest
    otherwise. A box reaching the origin with a negative numerator gives -1.
    """
    lo, hi = _endpoints(box)
    t = np.broadcast_to(np.asarray(v_targ, dtype=np.float64), lo.shape)
    tn = np.linalg.norm(t, axis=-1)
    if np.any(tn == 0):
        raise ContractError("cosine similarity needs a non-zero target vector")
    num = np.minimum(lo * t, hi * t).sum(axis=-1)
    max_norm = np.sqrt(np.maximum(lo * lo, hi * hi).sum(axis=-1))
    straddle = (lo <= 0) & (hi >= 0)
    min_norm = np.sqrt(np.where(straddle, 0.0, np.minimum(lo * lo, hi * hi)).sum(axis=-1))
    denom = np.where(num >= 0, max_norm, min_norm)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(denom > 0, num / (np.where(denom > 0, denom, 1.0) * tn), -1.0)
    out = np.clip(out, -1.0, 1.0)
    return float(out) if out.ndim == 0 else out


def cosine_similarity_max_bound(box, v_targ):
    """Sound upper bound on max over the box of cos(v', v_targ)."""
    return _neg(cosine_similarity_min_bound(box, -np.asarray(v_targ, dtype=np.float64)))


def _neg(x):
    return -x if np.ndim(x) else -float(x)


def certified_top_k_exclusion(box, j: int, k: int):
    """True when at least ``k`` other features provably outrank feature ``j`` in magnitude."""
    lo, hi = _endpoints(box)
    n = lo.shape[-1]
    if not 0 <= j < n:
        raise ContractError(f"sensitive index {j} out of range for {n} features")
    if not 0 <= k < n:
        raise ContractError(f"k={k} out of range for {n} features")
    straddle = (lo <= 0) & (hi >= 0)
    min_mag = np.where(straddle, 0.0, np.minimum(np.abs(lo), np.abs(hi)))
    max_mag_j = np.maximum(np.abs(lo[..., j]), np.abs(hi[..., j]))
    beats = min_mag > max_mag_j[..., None]
    beats[..., j] = False
    out = beats.sum(axis=-1) >= k
    return bool(out) if out.ndim == 0 else out


def top_k_contains(v, j: int, k: int):
    """Whether feature ``j`` is among the ``k`` largest magnitudes (ties favour ``j``)."""
    a = np.abs(np.asarray(v, dtype=np.float64))
    out = (a > a[..., j : j + 1]).sum(axis=-1) < k
    return bool(out) if out.ndim == 0 else out


def bias_score(v, j: int):
    """Share of total gradient magnitude on feature ``j``; 0 for an all-zero gradient."""
    a = np.abs(np.asarray(v, dtype=np.float64))
    if not 0 <= j < a.shape[-1]:
        raise ContractError(f"feature index {j} out of range")
    total = a.sum(axis=-1)
    out = np.where(total > 0, a[..., j] / np.where(total > 0, total, 1.0), 0.0)
    return float(out) if out.ndim == 0 else out


def corner_mask_targets(image_shape: tuple, k: int = 5, insets: int = 5) -> np.ndarray:
    """Targets with a ``k x k`` block of ones near each image corner.

    Returns ``(4 * insets, C*H*W)`` flat masks ordered corner-major
    (top-left, top-right, bottom-left, bottom-right); inset ``o`` shifts the
    block ``o`` pixels diagonally inward. Masks are unscaled (0/1).
    """
    if len(image_shape) == 2:
        image_shape = (1,) + tuple(image_shape)
    c, h, w = image_shape
    if k + insets - 1 > min(h, w):
        raise ContractError(f"{k}x{k} block with {insets} insets does not fit a {h}x{w} image")
    out = []
    for corner in ("tl", "tr", "bl", "br"):
        for o in range(insets):
            m = np.zeros((c, h, w))
            r0 = o if corner[0] == "t" else h - k - o
            c0 = o if corner[1] == "l" else w - k - o
            m[:, r0 : r0 + k, c0 : c0 + k] = 1.0
            out.append(m.ravel())
    return np.stack(out)


def unit_rms(t) -> np.ndarray:
    """Scale each row to root-mean-square 1 (so its squared norm equals its length)."""
    t = np.asarray(t, dtype=np.float64)
    r = np.sqrt(np.mean(t * t, axis=-1, keepdims=True))
    if np.any(r == 0):
        raise ContractError("cannot normalise an all-zero target")
    return t / r
