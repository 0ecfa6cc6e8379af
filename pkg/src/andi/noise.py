"""Noise generators: i.i.d. Gaussian and multi-resolution pyramidal Gaussian.

Pyramidal noise sums Gaussian fields drawn at geometrically shrinking
resolutions, bilinearly upsampled to full size and scaled by a decaying
factor per level, then normalizes the sum to unit empirical variance.
The low-resolution levels give the field long-range spatial correlation,
which is what makes a denoiser trained on it sensitive to structure at
many scales.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import NoiseGenerationError, ValidationError
from .grid import bilinear_upsample
from .rng import keyed_rng

__all__ = [
    "PyramidConfig",
    "gaussian_noise",
    "pyramid_level_dims",
    "pyramidal_noise",
    "gaussian_noise_from",
    "pyramidal_noise_from",
]


@dataclass(frozen=True)
class PyramidConfig:
    """Pyramidal noise parameters.

    ``levels`` fields are summed with per-level scale ``decay**i``; with
    ``jitter`` on, each level's shrink factor is drawn as 2 + Unif(0, 2),
    otherwise it is fixed at 2.
    """

    levels: int = 10
    decay: float = 0.8
    jitter: bool = True

    def __post_init__(self):
        if self.levels < 1:
            raise ValidationError(f"levels must be >= 1, got {self.levels}")
        if not 0.0 < self.decay <= 1.0:
            raise ValidationError(f"decay must be in (0, 1], got {self.decay}")


def _check_shape(shape) -> tuple:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or any(s < 1 for s in shape):
        raise ValidationError(f"noise shape must be (H, W, C) >= 1, got {shape}")
    return shape


def gaussian_noise_from(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.standard_normal(_check_shape(shape), dtype=np.float32)


def gaussian_noise(shape, seed: int) -> np.ndarray:
    """Standard normal (H, W, C) sample; same seed gives identical bits."""
    return gaussian_noise_from(keyed_rng(seed, "gaussian"), shape)


def pyramid_level_dims(H: int, W: int, i: int, r_i: float) -> tuple:
    """Grid size of pyramid level i: ceil(H / r_i**(i-1)), same for W."""
    if i < 1:
        raise ValidationError(f"level index must be >= 1, got {i}")
    shrink = float(r_i) ** (i - 1)
    return max(1, math.ceil(H / shrink)), max(1, math.ceil(W / shrink))


def pyramidal_noise_from(
    rng: np.random.Generator, shape, cfg: PyramidConfig
) -> np.ndarray:
    shape = _check_shape(shape)
    H, W, C = shape
    acc = np.zeros(shape, dtype=np.float32)
    for i in range(1, cfg.levels + 1):
        # one shrink-factor draw per level per sample, then the level's field
        r_i = 2.0 + rng.uniform(0.0, 2.0) if cfg.jitter else 2.0
        h_i, w_i = pyramid_level_dims(H, W, i, r_i)
        level = rng.standard_normal((h_i, w_i, C), dtype=np.float32)
        acc += np.float32(cfg.decay**i) * bilinear_upsample(level, (H, W))
    std = float(np.std(acc.astype(np.float64)))
    if std == 0.0:
        raise NoiseGenerationError(
            "pyramidal sample has zero empirical standard deviation"
        )
    return acc / np.float32(std)


def pyramidal_noise(shape, cfg: PyramidConfig, seed: int) -> np.ndarray:
    """Unit-variance pyramidal Gaussian (H, W, C) sample, deterministic per seed."""
    return pyramidal_noise_from(keyed_rng(seed, "pyramidal"), shape, cfg)
