"""Scikit-learn style estimator wrapping the full detection pipeline.

``AndiDetector`` fits a normative diffusion model to a stack of healthy
slices and then scores or segments multi-modal volumes. Constructor
arguments are stored verbatim (``get_params``/``set_params``/``clone``
compatible); validation happens at fit time. Inputs are expected to be
intensity-normalized consistently between fit and predict (see
``andi.grid.normalize_by_percentile`` for the per-channel convention the
CLI uses).
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ._validation import as_volume
from .anomaly import anomaly_volume
from .denoiser import DenoiserConfig
from .errors import DegenerateInputError
from .noise import PyramidConfig
from .postproc import binarize, dilate_3d, median_filter_3d, yen_threshold
from .rng import derive_seed
from .schedule import TimeRange, linear_beta_schedule
from .train import TrainConfig, train

__all__ = ["AndiDetector"]


class AndiDetector(BaseEstimator):
    """Unsupervised anomaly detector over multi-modal volumes.

    fit(X): X is a float32 array of healthy slices, shape (N, H, W, C),
    with H and W divisible by 2**depth.
    transform(V): V is one volume, shape (H, W, D, C); returns the pooled,
    median-filtered anomaly map of shape (H, W, D).
    predict(V): returns the binary segmentation mask of shape (H, W, D)
    from the per-volume automatic threshold plus dilation.
    """

    def __init__(
        self,
        schedule_steps=1000,
        beta_1=1e-4,
        beta_T=0.02,
        base_width=16,
        depth=2,
        time_embed_dim=32,
        epochs=20,
        batch_size=32,
        lr_base=2e-5,
        lr_peak=1e-4,
        warmup_fraction=0.05,
        weight_decay=0.01,
        training_noise="pyramidal",
        pyramid_levels=10,
        pyramid_decay=0.8,
        pyramid_jitter=True,
        t_low=75,
        t_high=200,
        agg="gm",
        eval_noise="gaussian",
        median_filter=3,
        dilate_radius=1,
        yen_bins=256,
        threads=1,
        random_state=0,
    ):
        self.schedule_steps = schedule_steps
        self.beta_1 = beta_1
        self.beta_T = beta_T
        self.base_width = base_width
        self.depth = depth
        self.time_embed_dim = time_embed_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_base = lr_base
        self.lr_peak = lr_peak
        self.warmup_fraction = warmup_fraction
        self.weight_decay = weight_decay
        self.training_noise = training_noise
        self.pyramid_levels = pyramid_levels
        self.pyramid_decay = pyramid_decay
        self.pyramid_jitter = pyramid_jitter
        self.t_low = t_low
        self.t_high = t_high
        self.agg = agg
        self.eval_noise = eval_noise
        self.median_filter = median_filter
        self.dilate_radius = dilate_radius
        self.yen_bins = yen_bins
        self.threads = threads
        self.random_state = random_state

    def _pyramid(self):
        return PyramidConfig(
            levels=self.pyramid_levels,
            decay=self.pyramid_decay,
            jitter=self.pyramid_jitter,
        )

    def fit(self, X, y=None):
        """Train the denoiser on healthy (N, H, W, C) slices."""
        X = np.asarray(X, dtype=np.float32)
        if X.ndim != 4:
            raise ValueError(f"X must be (N, H, W, C), got shape {X.shape}")
        schedule = linear_beta_schedule(self.schedule_steps, self.beta_1, self.beta_T)
        TimeRange(self.t_low, self.t_high).check_schedule(schedule)
        cfg = DenoiserConfig(
            in_channels=X.shape[3],
            base_width=self.base_width,
            depth=self.depth,
            time_embed_dim=self.time_embed_dim,
        )
        train_cfg = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr_base=self.lr_base,
            lr_peak=self.lr_peak,
            warmup_fraction=self.warmup_fraction,
            weight_decay=self.weight_decay,
            training_noise=self.training_noise,
            seed=self.random_state,
        )
        result = train(X, cfg, train_cfg, schedule, self._pyramid())
        self.params_ = result.params
        self.schedule_ = schedule
        self.history_ = result.epoch_losses
        self.n_channels_ = X.shape[3]
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError(
                "this AndiDetector is not fitted yet; call fit before predicting"
            )

    def transform(self, V) -> np.ndarray:
        """Pooled, median-filtered anomaly map for one (H, W, D, C) volume."""
        self._check_fitted()
        V = as_volume(V, "volume")
        result = anomaly_volume(
            self.params_,
            V,
            TimeRange(self.t_low, self.t_high),
            self.schedule_,
            agg=self.agg,
            eval_noise=self.eval_noise,
            seed=derive_seed(self.random_state, "estimator-eval"),
            pyramid_cfg=self._pyramid(),
            threads=self.threads,
        )
        pooled = result.pooled
        if self.median_filter:
            pooled = median_filter_3d(pooled, self.median_filter)
        return pooled

    def predict(self, V) -> np.ndarray:
        """Binary anomaly mask for one volume (1 = anomalous voxel)."""
        scores = self.transform(V)
        try:
            thr = yen_threshold(scores, bins=self.yen_bins)
        except DegenerateInputError:
            return np.zeros(scores.shape, dtype=np.uint8)
        mask = binarize(scores, thr)
        if self.dilate_radius:
            mask = dilate_3d(mask, self.dilate_radius)
        return mask
