"""Semi-supervised differentiable particle filters on a numpy reverse-mode autodiff engine."""

from .autodiff import DiffValue, ParamStore, gradient_check
from .config import ExperimentConfig, load_config
from .core import (
    ContractError,
    DegenerateWeightsError,
    ParticleSet,
    Trajectory,
    TrajectoryDataset,
    effective_sample_size,
    normalize_log_weights,
    weighted_mean_estimate,
)
from .envs import BeaconWorldSpec, LinearGaussianSpec, generate_beacon_world, generate_linear_gaussian, mask_labels
from .filter import FilterConfig, InitProtocol, filter_forward, filter_forward_batch
from .metrics import MetricsReport, rmse_at_step, rmse_scaled
from .models import LearnedModel
from .objectives import LossConfig, combined_loss, pseudo_loglik, supervised_loss
from .train import OptimizerState, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "DiffValue",
    "ParamStore",
    "gradient_check",
    "ExperimentConfig",
    "load_config",
    "ContractError",
    "DegenerateWeightsError",
    "ParticleSet",
    "Trajectory",
    "TrajectoryDataset",
    "effective_sample_size",
    "normalize_log_weights",
    "weighted_mean_estimate",
    "BeaconWorldSpec",
    "LinearGaussianSpec",
    "generate_beacon_world",
    "generate_linear_gaussian",
    "mask_labels",
    "FilterConfig",
    "InitProtocol",
    "filter_forward",
    "filter_forward_batch",
    "MetricsReport",
    "rmse_at_step",
    "rmse_scaled",
    "LearnedModel",
    "LossConfig",
    "combined_loss",
    "pseudo_loglik",
    "supervised_loss",
    "OptimizerState",
    "TrainConfig",
    "evaluate",
    "train",
]
