"""Model-assisted doubly-robust series estimation of conditional average
treatment effects with high-dimensional controls."""
from ._backend import BACKEND
from .basis import BasisMatrix, BasisSpec, design_matrix, evaluate_basis
from .dataset import CsvSchema, Dataset, PreprocessConfig, load_csv
from .estimator import CateFit, EstimatorConfig, fit_cate, fit_counterfactual
from .penalty import PenaltyConfig
from .simulation import DgpConfig, generate, run_monte_carlo
from .solver import SolverConfig

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "BasisMatrix",
    "BasisSpec",
    "CateFit",
    "CsvSchema",
    "Dataset",
    "DgpConfig",
    "EstimatorConfig",
    "PenaltyConfig",
    "PreprocessConfig",
    "SolverConfig",
    "design_matrix",
    "evaluate_basis",
    "fit_cate",
    "fit_counterfactual",
    "generate",
    "load_csv",
    "run_monte_carlo",
]
