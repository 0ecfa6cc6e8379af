"""Deviation maps between exact and learned denoising steps, aggregated over time.

For each timestep t in the evaluation range, the input slice is noised with
an independent draw, and the squared difference between the exact backward
transition mean (which knows the input) and the model's predicted transition
(which only knows the normative distribution) becomes the per-step deviation
map. Deviations are aggregated per channel over the range by arithmetic or
geometric mean, and per-channel maps are reduced by an elementwise max.

Parallelism contract: the unit of work is a single timestep, whose noise
comes from a stream keyed by (seed, slice_index, t), and the final reduction
folds d_t in ascending t into float64 accumulators. Results are therefore
byte-identical for any thread count.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import denoiser as dn
from ._validation import as_slice, as_volume
from .errors import ValidationError
from .noise import PyramidConfig, pyramidal_noise_from
from .rng import keyed_rng
from .schedule import NoiseSchedule, TimeRange, forward_noise, mu_from_eps, posterior_mean

__all__ = [
    "DeviationStack",
    "AnomalyResult",
    "deviation_at",
    "deviation_stack_slice",
    "aggregate_am",
    "aggregate_gm",
    "anomaly_map_slice",
    "anomaly_volume",
    "GM_FLOOR",
]

GM_FLOOR = 1e-20


@dataclass(frozen=True)
class DeviationStack:
    """Per-timestep squared-deviation maps over an inclusive time range."""

    maps: np.ndarray  # (len(range), H, W, C), ascending t
    time_range: TimeRange

    def __post_init__(self):
        if self.maps.shape[0] != len(self.time_range):
            raise ValidationError(
                f"stack holds {self.maps.shape[0]} maps for a range of "
                f"{len(self.time_range)} steps"
            )


@dataclass
class AnomalyResult:
    """Aggregated per-channel anomaly volume and its channel-max pooling."""

    per_channel: np.ndarray  # (H, W, D, C)
    pooled: np.ndarray  # (H, W, D)
    norm_min: float = None
    norm_max: float = None


def _eval_noise_for(shape, kind, pyramid_cfg, seed, slice_index, t):
    rng = keyed_rng(seed, "eval-noise", slice_index, t)
    if kind == "pyramidal":
        return pyramidal_noise_from(rng, shape, pyramid_cfg or PyramidConfig())
    if kind == "gaussian":
        return rng.standard_normal(shape, dtype=np.float32)
    raise ValidationError(f"eval noise must be gaussian or pyramidal, got {kind!r}")


def deviation_at(params, x0: np.ndarray, t: int, eps: np.ndarray, s: NoiseSchedule):
    """Squared deviation map d_t for one timestep and one noise draw."""
    x0 = as_slice(x0, "x0")
    x_t = forward_noise(x0, t, eps, s)
    mu_exact = posterior_mean(x_t, x0, t, s)
    mu_model = mu_from_eps(x_t, dn.forward(params, x_t, t), t, s)
    diff = mu_exact - mu_model
    return diff * diff


def deviation_stack_slice(
    params,
    x0: np.ndarray,
    time_range: TimeRange,
    s: NoiseSchedule,
    eval_noise: str = "gaussian",
    seed: int = 0,
    slice_index: int = 0,
    pyramid_cfg: PyramidConfig = None,
    threads: int = 1,
) -> DeviationStack:
    """All d_t for t in the range, with one keyed noise draw per timestep.

    Timesteps may be evaluated by up to ``threads`` workers; every t is an
    independent task, so the stack content does not depend on scheduling.
    """
    x0 = as_slice(x0, "x0")
    time_range.check_schedule(s)
    steps = list(time_range.steps())
    maps = np.empty((len(steps), *x0.shape), dtype=np.float32)

    def compute(t):
        eps = _eval_noise_for(x0.shape, eval_noise, pyramid_cfg, seed, slice_index, t)
        maps[t - time_range.t_low] = deviation_at(params, x0, t, eps, s)

    if threads <= 1:
        for t in steps:
            compute(t)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(compute, steps))
    return DeviationStack(maps=maps, time_range=time_range)


def _check_stack(stack: DeviationStack) -> np.ndarray:
    maps = stack.maps if isinstance(stack, DeviationStack) else np.asarray(stack)
    if maps.ndim != 4 or maps.shape[0] == 0:
        raise ValidationError("deviation stack must be a non-empty (T, H, W, C) array")
    return maps


def aggregate_am(stack) -> np.ndarray:
    """Elementwise arithmetic mean over timesteps (ascending float64 fold)."""
    maps = _check_stack(stack)
    acc = np.zeros(maps.shape[1:], dtype=np.float64)
    for k in range(maps.shape[0]):
        acc += maps[k]
    return (acc / maps.shape[0]).astype(np.float32)


def aggregate_gm(stack, floor: float = GM_FLOOR) -> np.ndarray:
    """Elementwise geometric mean over timesteps, flooring zeros before log."""
    maps = _check_stack(stack)
    if floor <= 0.0:
        raise ValidationError(f"floor must be > 0, got {floor}")
    acc = np.zeros(maps.shape[1:], dtype=np.float64)
    for k in range(maps.shape[0]):
        acc += np.log(np.maximum(maps[k].astype(np.float64), floor))
    return np.exp(acc / maps.shape[0]).astype(np.float32)


_AGGREGATORS = {"am": aggregate_am, "gm": aggregate_gm}


def anomaly_map_slice(
    params,
    x0: np.ndarray,
    time_range: TimeRange,
    s: NoiseSchedule,
    agg: str = "gm",
    eval_noise: str = "gaussian",
    seed: int = 0,
    slice_index: int = 0,
    pyramid_cfg: PyramidConfig = None,
    threads: int = 1,
) -> np.ndarray:
    """Aggregated (H, W, C) anomaly map for one slice.

    Evaluation noise defaults to Gaussian regardless of how the model was
    trained; pass ``eval_noise='pyramidal'`` to override for ablations.
    """
    if agg not in _AGGREGATORS:
        raise ValidationError(f"agg must be one of {sorted(_AGGREGATORS)}, got {agg!r}")
    stack = deviation_stack_slice(
        params, x0, time_range, s, eval_noise, seed, slice_index, pyramid_cfg, threads
    )
    return _AGGREGATORS[agg](stack)


def anomaly_volume(
    params,
    vol: np.ndarray,
    time_range: TimeRange,
    s: NoiseSchedule,
    agg: str = "gm",
    eval_noise: str = "gaussian",
    seed: int = 0,
    pyramid_cfg: PyramidConfig = None,
    threads: int = 1,
) -> AnomalyResult:
    """Slice-wise anomaly maps stacked into a volume, plus the channel max.

    No normalization is applied here; scores are raw squared deviations.
    """
    vol = as_volume(vol, "volume")
    H, W, D, C = vol.shape
    per_channel = np.empty((H, W, D, C), dtype=np.float32)
    for k in range(D):
        per_channel[:, :, k, :] = anomaly_map_slice(
            params,
            vol[:, :, k, :],
            time_range,
            s,
            agg,
            eval_noise,
            seed,
            slice_index=k,
            pyramid_cfg=pyramid_cfg,
            threads=threads,
        )
    pooled = per_channel.max(axis=3)
    return AnomalyResult(per_channel=per_channel, pooled=pooled)
