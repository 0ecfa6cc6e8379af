"""Aggregated normative diffusion for unsupervised anomaly detection.

Train a small denoising diffusion model on healthy multi-modal slices
(optionally with multi-resolution pyramidal noise), then score volumes by
aggregating the per-timestep deviations between the exact backward
transition and the model's denoising step, and segment them with a fully
unsupervised per-volume threshold.
"""

from .anomaly import (
    AnomalyResult,
    DeviationStack,
    aggregate_am,
    aggregate_gm,
    anomaly_map_slice,
    anomaly_volume,
    deviation_at,
    deviation_stack_slice,
)
from .config import ExperimentConfig, desk_config, load_config, paper_config
from .denoiser import DenoiserConfig, DenoiserParams, forward, init_params
from .errors import AndiError, ValidationError
from .estimator import AndiDetector
from .metrics import EvalReport, auprc, ceil_dice, dice, dice_yen, normalize_scores
from .noise import PyramidConfig, gaussian_noise, pyramidal_noise
from .postproc import binarize, dilate_3d, median_filter_3d, yen_threshold
from .schedule import (
    NoiseSchedule,
    TimeRange,
    forward_noise,
    linear_beta_schedule,
    mu_from_eps,
    posterior_mean,
    posterior_variance,
)
from .synthgen import AnomalySpec, PhantomConfig, gen_dataset, gen_healthy, inject_anomalies
from .train import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "AndiDetector",
    "AndiError",
    "AnomalyResult",
    "AnomalySpec",
    "DenoiserConfig",
    "DenoiserParams",
    "DeviationStack",
    "EvalReport",
    "ExperimentConfig",
    "NoiseSchedule",
    "PhantomConfig",
    "PyramidConfig",
    "TimeRange",
    "TrainConfig",
    "ValidationError",
    "aggregate_am",
    "aggregate_gm",
    "anomaly_map_slice",
    "anomaly_volume",
    "auprc",
    "binarize",
    "ceil_dice",
    "desk_config",
    "deviation_at",
    "deviation_stack_slice",
    "dice",
    "dice_yen",
    "dilate_3d",
    "forward",
    "forward_noise",
    "gaussian_noise",
    "gen_dataset",
    "gen_healthy",
    "init_params",
    "inject_anomalies",
    "linear_beta_schedule",
    "load_config",
    "median_filter_3d",
    "mu_from_eps",
    "normalize_scores",
    "paper_config",
    "posterior_mean",
    "posterior_variance",
    "pyramidal_noise",
    "yen_threshold",
]
