"""Separable surrogates and Bayesian inversion for stochastic Darcy flow."""

from .errors import NumericalError, SepuqError, ValidationError
from .config import ExperimentConfig, load_config
from .experiment import Pipeline, report
from .gp import GPBank, GPHyper
from .kle import CovarianceSpec, KLBasis, build_kl_basis, energy_ratio, kappa, log_kappa
from .mcmc import McmcConfig, run_chain
from .mesh import GridMesh, build_mesh, fem_solve
from .pgd import PGDTolerances, SeparableSolution, ThetaGrid, enrich, evaluate_surrogate
from .vb import ObservationSet, ThetaPrior, VBConfig, run_vb

__version__ = "0.1.0"

__all__ = [
    "CovarianceSpec", "ExperimentConfig", "GPBank", "GPHyper", "GridMesh", "KLBasis",
    "McmcConfig", "NumericalError", "ObservationSet", "PGDTolerances", "Pipeline", "SepuqError",
    "SeparableSolution", "ThetaGrid", "ThetaPrior", "VBConfig", "ValidationError",
    "build_kl_basis", "build_mesh", "energy_ratio", "enrich", "evaluate_surrogate", "fem_solve",
    "kappa", "load_config", "log_kappa", "report", "run_chain", "run_vb",
]
