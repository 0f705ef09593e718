"""Laser-absorption state retrieval with a physics-checked estimator and an online correction loop.

Submodules
----------
spectral
    Toy line-by-line forward model, grids, line databases and datasets.
nn
    Small numpy neural-network core (layers, Adam, stacked ensembles, checkpoints).
estimator
    Offline spectrum-to-state regressor giving the first guess.
pad
    Physics-driven error scoring and the acceptance threshold.
correction
    Surrogate-guided search that repairs rejected first guesses.
harness
    Experiment protocols, metrics and report writers.
"""

from .correction import CorrectionConfig, CorrectionResult, run_correction
from .estimator import EstimatorModel, TrainConfig, estimate, train_estimator
from .harness import ExperimentConfig, compute_metrics, run_experiment
from .pad import ErrorBreakdown, FeasibleDomain, Pad, PadConfig, is_anomaly, overall_error
from .spectral import (
    DEFAULT_GRID,
    GasState,
    LineDatabase,
    SpectralGrid,
    Spectrum,
    bundled_db,
    canonical_db,
    generate_dataset,
    simulate_absorbance,
    simulate_emission,
)

__version__ = "0.1.0"

__all__ = [
    "CorrectionConfig",
    "CorrectionResult",
    "run_correction",
    "EstimatorModel",
    "TrainConfig",
    "estimate",
    "train_estimator",
    "ExperimentConfig",
    "compute_metrics",
    "run_experiment",
    "ErrorBreakdown",
    "FeasibleDomain",
    "Pad",
    "PadConfig",
    "is_anomaly",
    "overall_error",
    "DEFAULT_GRID",
    "GasState",
    "LineDatabase",
    "SpectralGrid",
    "Spectrum",
    "bundled_db",
    "canonical_db",
    "generate_dataset",
    "simulate_absorbance",
    "simulate_emission",
]
