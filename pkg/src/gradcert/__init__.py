"""Certified bounds on input-gradient explanations of neural networks."""

__version__ = "0.1.0"

from .certify import (
    CertificationOutcome,
    TargetSpec,
    certify_targeted,
    certify_untargeted,
    cosine_similarity_max_bound,
    cosine_similarity_min_bound,
)
from .errors import ContractError, DataFormatError, DimensionError, GradCertError, TrainingDiverged
from .intervals import (
    GradientBox,
    InputRegion,
    IntervalMatrix,
    ModelRegion,
    explanation_bounds,
    interval_hadamard,
    interval_matmul,
    interval_matmul_exact_corners,
)
from .network import ClassLogit, CrossEntropy, Network, SquaredError, forward, input_gradient, load, predict, preset, save
from .tensor import DiffGraph, Tensor

__all__ = [
    "CertificationOutcome",
    "ClassLogit",
    "ContractError",
    "CrossEntropy",
    "DataFormatError",
    "DiffGraph",
    "DimensionError",
    "GradCertError",
    "GradientBox",
    "InputRegion",
    "IntervalMatrix",
    "ModelRegion",
    "Network",
    "SquaredError",
    "TargetSpec",
    "Tensor",
    "TrainingDiverged",
    "certify_targeted",
    "certify_untargeted",
    "cosine_similarity_max_bound",
    "cosine_similarity_min_bound",
    "explanation_bounds",
    "forward",
    "input_gradient",
    "interval_hadamard",
    "interval_matmul",
    "interval_matmul_exact_corners",
    "load",
    "predict",
    "preset",
    "save",
]
