"""S-estimators of regression and structured covariance parameters in
balanced linear models."""

from .errors import NoSolution, StructsError
from .estimator import Dataset, SFit, SolverConfig, fit_ml_reference, fit_s
from .rho import RhoFunction
from .spherical import constants_for, consistency_b0, tune_cutoff
from .structures import (
    CovarianceStructure,
    ar1,
    compound_symmetry,
    lmm,
    stationary_banded,
    unstructured,
)

__all__ = [
    "CovarianceStructure",
    "Dataset",
    "NoSolution",
    "RhoFunction",
    "SFit",
    "SolverConfig",
    "StructsError",
    "ar1",
    "compound_symmetry",
    "consistency_b0",
    "constants_for",
    "fit_ml_reference",
    "fit_s",
    "lmm",
    "stationary_banded",
    "tune_cutoff",
    "unstructured",
]
