"""Koopman-style model identification with VAMP-based prediction uncertainty."""

from .data import TimeSeriesData
from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    InsufficientHistoryError,
    IntegrationDivergedError,
    KoopUQError,
    RolloutDivergedError,
    SolverDivergedError,
)
from .koopman import EmbeddingConfig, KoopmanModel, LiftSpec, evaluate_lift, fit_model
from .predictor import make_batches, rollout
from .sim import compute_ftle, simulate_hopf, simulate_neuron
from .uq import UncertaintyReport, UqConfig, run_uq, solve_batch_inverse, sweep_batch_sizes
from .vamp import PriorSpec, SensingModel, VampOptions, denoise_mmse, lmmse_estimate, vamp_solve

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DivergenceError",
    "EmbeddingConfig",
    "InsufficientHistoryError",
    "IntegrationDivergedError",
    "KoopUQError",
    "KoopmanModel",
    "LiftSpec",
    "PriorSpec",
    "RolloutDivergedError",
    "SensingModel",
    "SolverDivergedError",
    "TimeSeriesData",
    "UncertaintyReport",
    "UqConfig",
    "VampOptions",
    "compute_ftle",
    "denoise_mmse",
    "evaluate_lift",
    "fit_model",
    "lmmse_estimate",
    "make_batches",
    "rollout",
    "run_uq",
    "simulate_hopf",
    "simulate_neuron",
    "solve_batch_inverse",
    "sweep_batch_sizes",
    "vamp_solve",
]
