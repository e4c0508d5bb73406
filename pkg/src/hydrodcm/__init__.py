"""Cross-reservoir inflow forecasting with metadata-conditioned domain
generalization: a from-scratch autodiff engine, an LSTM forecaster with
adversarially aligned features and FiLM metadata modulation, a synthetic
many-domain benchmark, and an experiment harness."""

from .data import (ReservoirRecord, SyntheticWorldConfig, WindowSample,
                   build_split, generate_world, ingest_csv)
from .losses import LossWeights, nse, nse_report
from .model import ModelArch, ModelBundle, build_bundle
from .rng import Rng
from .tensor import Tensor, backward, no_grad
from .train import ExperimentConfig, RunReport, run_experiment, run_single

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig", "LossWeights", "ModelArch", "ModelBundle",
    "ReservoirRecord", "Rng", "RunReport", "SyntheticWorldConfig", "Tensor",
    "WindowSample", "backward", "build_bundle", "build_split",
    "generate_world", "ingest_csv", "no_grad", "nse", "nse_report",
    "run_experiment", "run_single",
]
