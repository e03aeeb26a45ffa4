"""Spectral transfer learning for multi-task low-rank regression."""
__version__ = "0.1.0"

from smart.diagnostics import SpectralDiagnostics, spectral_diagnostics
from smart.initializers import InitSpec, default_warm_start, warm_start
from smart.linalg import NumericalError, RankDeficientError
from smart.model_select import SelectionGrid, auto_fit, select_lambdas, select_rank
from smart.simulation import DgpConfig, ExperimentConfig, run_experiment, simulate
from smart.solver import FitReport, SmartFactors, SolverConfig, build_source_basis, smart_fit

__all__ = [
    "DgpConfig", "ExperimentConfig", "FitReport", "InitSpec", "NumericalError",
    "RankDeficientError", "SelectionGrid", "SmartFactors", "SolverConfig",
    "SpectralDiagnostics", "auto_fit", "build_source_basis", "default_warm_start",
    "run_experiment", "select_lambdas", "select_rank", "simulate", "smart_fit",
    "spectral_diagnostics", "warm_start",
]
