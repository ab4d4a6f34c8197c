"""Simulation and numerical verification of nonlinear renewal theory.

Perturbed random walks ``Z_n = S_n + xi_n``, their first-passage rules,
second-order and intermediate expansions of the expected stopping time,
and the two-sample rank sequential probability ratio test whose sample
size those expansions predict.
"""

from .errors import (
    BoundaryError,
    BranchError,
    ConfigError,
    DomainError,
    DriftError,
    NlRenewalError,
    NumericsError,
    ShapeError,
    TieError,
)
from .rng_models import (
    IncrementModel,
    PerturbationModel,
    PerturbedPath,
    Rho,
    TruncationParams,
    generate_perturbation,
    sample_increments,
    zeta,
)
from .renewal_core import (
    CrossingBatch,
    CrossingRecord,
    RenewalConstants,
    estimate_renewal_constants,
    simulate_linear_crossing,
    simulate_linear_crossings,
    wald_check,
)

__version__ = "0.1.0"

__all__ = [
    "BoundaryError", "BranchError", "ConfigError", "DomainError", "DriftError", "NlRenewalError",
    "NumericsError", "ShapeError", "TieError", "IncrementModel", "PerturbationModel", "PerturbedPath",
    "Rho", "TruncationParams", "generate_perturbation", "sample_increments", "zeta", "CrossingBatch",
    "CrossingRecord", "RenewalConstants", "estimate_renewal_constants", "simulate_linear_crossing",
    "simulate_linear_crossings", "wald_check", "__version__",
]
