"""Goal-oriented adaptive design of gradient-enhanced GP surrogates for parameter identification."""

from .design import Design, WorkModelParams, incremental_work, work
from .error_model import ErrorModelConfig, NoiseModel, global_error, local_error, transport_factors
from .forward import evaluate, get_model, register_model
from .gegpr import GegprModel, KernelParams, TrainingSet, fit, optimize_hyperparameters, predict
from .inverse import InverseProblem, gauss_newton, reconstruct, sampled_true_error
from .loop import LoopConfig, RunTrace, run_adaptive, run_baseline_uniform
from .tolopt import BudgetProblem, solve_tolerances, verify_kkt

__version__ = "0.1.0"

__all__ = [
    "BudgetProblem", "Design", "ErrorModelConfig", "GegprModel", "InverseProblem", "KernelParams",
    "LoopConfig", "NoiseModel", "RunTrace", "TrainingSet", "WorkModelParams", "evaluate", "fit",
    "gauss_newton", "get_model", "global_error", "incremental_work", "local_error",
    "optimize_hyperparameters", "predict", "reconstruct", "register_model", "run_adaptive",
    "run_baseline_uniform", "sampled_true_error", "solve_tolerances", "transport_factors",
    "verify_kkt", "work",
]
