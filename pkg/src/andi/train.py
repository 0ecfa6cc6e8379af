"""Training loop: noise-prediction objective, AdamW, warmup + cosine schedule.

Each step draws one timestep per sample uniformly from [1, T], draws the
configured training noise (Gaussian or pyramidal), noises the batch, and
takes one AdamW step on the mean squared noise-prediction error. All
randomness is keyed by (seed, purpose, counter), so a run is a pure
function of its configuration and can be resumed bit-exactly.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import denoiser
from .denoiser import DenoiserConfig, DenoiserParams
from .errors import TrainingError, ValidationError
from .noise import PyramidConfig, pyramidal_noise_from
from .rng import keyed_rng
from .schedule import NoiseSchedule

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "TrainResult",
    "loss_and_grad",
    "lr_at",
    "adamw_step",
    "train",
]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr_base: float = 2e-5
    lr_peak: float = 1e-4
    warmup_fraction: float = 0.05
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    training_noise: str = "pyramidal"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValidationError(
                f"warmup_fraction must be in (0, 1), got {self.warmup_fraction}"
            )
        if self.lr_base > self.lr_peak:
            raise ValidationError("lr_base must not exceed lr_peak")
        if self.training_noise not in ("gaussian", "pyramidal"):
            raise ValidationError(
                f"training_noise must be gaussian or pyramidal, got {self.training_noise!r}"
            )


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def fresh(cls, n_params: int, dtype=np.float32) -> "OptimizerState":
        return cls(m=np.zeros(n_params, dtype=dtype), v=np.zeros(n_params, dtype=dtype), step=0)


@dataclass
class TrainResult:
    params: DenoiserParams
    opt_state: OptimizerState
    log: list = field(default_factory=list)  # (step, epoch, lr, loss) records
    epoch_losses: list = field(default_factory=list)


def _batch_loss_and_grad(params, x0, t, eps, s: NoiseSchedule):
    """Mean squared noise-prediction error and its parameter gradient."""
    dtype = params.values.dtype
    x0 = x0.astype(dtype, copy=False)
    eps = eps.astype(dtype, copy=False)
    ab = s.alpha_bar[np.asarray(t)]
    c_sig = np.sqrt(ab).astype(dtype)[:, None, None, None]
    c_noise = np.sqrt(1.0 - ab).astype(dtype)[:, None, None, None]
    x_t = c_sig * x0 + c_noise * eps
    tape = []
    eps_hat = denoiser._forward_batch(params, x_t, np.asarray(t), tape)
    resid = eps_hat - eps
    loss = float(np.mean(resid.astype(np.float64) ** 2))
    grad_out = resid * dtype.type(2.0 / resid.size)
    grad = denoiser._backward_from_tape(params, tape, grad_out)
    return loss, grad


def loss_and_grad(params, x0: np.ndarray, t: int, eps: np.ndarray, s: NoiseSchedule):
    """Per-slice objective: loss = mean((eps_hat - eps)^2) and d(loss)/d(theta)."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValidationError(
            f"noise shape {eps.shape} does not match slice {x0.shape}"
        )
    t = s.check_step(t)
    loss, grad = _batch_loss_and_grad(params, x0[None], np.array([t]), eps[None], s)
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss at t={t}")
    return loss, grad


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Learning rate at a 0-based step: linear ramp, then cosine decay.

    The ramp covers the first ceil(warmup_fraction * total_steps) steps and
    both phases equal lr_peak at the junction; the final step is lr_base.
    """
    if not 0 <= step < total_steps:
        raise ValidationError(f"step {step} outside [0, {total_steps})")
    warm = math.ceil(cfg.warmup_fraction * total_steps)
    if step < warm:
        return cfg.lr_base + (cfg.lr_peak - cfg.lr_base) * (step / warm)
    last = total_steps - 1
    if last == warm:
        return cfg.lr_peak
    phase = (step - warm) / (last - warm)
    return cfg.lr_base + (cfg.lr_peak - cfg.lr_base) * 0.5 * (1.0 + math.cos(math.pi * phase))


def adamw_step(
    params: DenoiserParams,
    grads: np.ndarray,
    state: OptimizerState,
    lr: float,
    cfg: TrainConfig,
):
    """One decoupled-weight-decay Adam update; returns (params, state)."""
    if grads.shape != params.values.shape:
        raise ValidationError("gradient vector length does not match parameters")
    dtype = params.values.dtype
    b1 = dtype.type(cfg.adam_beta1)
    b2 = dtype.type(cfg.adam_beta2)
    step = state.step + 1
    m = b1 * state.m + (1 - b1) * grads
    v = b2 * state.v + (1 - b2) * grads * grads
    m_hat = m / dtype.type(1.0 - cfg.adam_beta1**step)
    v_hat = v / dtype.type(1.0 - cfg.adam_beta2**step)
    update = m_hat / (np.sqrt(v_hat) + dtype.type(cfg.adam_eps))
    theta = params.values - dtype.type(lr) * (
        update + dtype.type(cfg.weight_decay) * params.values
    )
    if not np.all(np.isfinite(theta)):
        raise TrainingError(f"non-finite parameter update at optimizer step {step}")
    return params.replace_values(theta), OptimizerState(m=m, v=v, step=step)


def _draw_batch_noise(shape, kind, pyramid_cfg, seed, global_step):
    n = shape[0]
    eps = np.empty(shape, dtype=np.float32)
    for i in range(n):  # per-sample streams: reproducible under any scheduling
        rng = keyed_rng(seed, "noise", global_step, i)
        if kind == "pyramidal":
            eps[i] = pyramidal_noise_from(rng, shape[1:], pyramid_cfg)
        else:
            eps[i] = rng.standard_normal(shape[1:], dtype=np.float32)
    return eps


def train(
    dataset: np.ndarray,
    denoiser_cfg: DenoiserConfig,
    cfg: TrainConfig,
    s: NoiseSchedule,
    pyramid_cfg: PyramidConfig = None,
    *,
    params: DenoiserParams = None,
    opt_state: OptimizerState = None,
    start_epoch: int = 0,
    stop_epoch: int = None,
    epoch_callback=None,
) -> TrainResult:
    """Train the denoiser on a stack of healthy (N, H, W, C) slices.

    Epochs reshuffle with a seeded permutation and the batch remainder is
    dropped, so every epoch runs the same number of steps and the learning
    rate schedule is exact. ``stop_epoch`` interrupts after that many epochs
    (the schedule still spans ``cfg.epochs``); pass the interrupted run's
    ``params``/``opt_state``/``start_epoch`` to resume, and the continuation
    is bit-identical to a run that never stopped because all randomness is
    keyed by epoch and step.
    """
    dataset = np.asarray(dataset, dtype=np.float32)
    if dataset.ndim != 4 or dataset.shape[0] == 0:
        raise ValidationError(
            f"dataset must be a non-empty (N, H, W, C) stack, got {dataset.shape}"
        )
    if dataset.shape[3] != denoiser_cfg.in_channels:
        raise ValidationError(
            f"dataset has {dataset.shape[3]} channels, model expects "
            f"{denoiser_cfg.in_channels}"
        )
    if cfg.training_noise == "pyramidal" and pyramid_cfg is None:
        pyramid_cfg = PyramidConfig()

    n = dataset.shape[0]
    steps_per_epoch = n // cfg.batch_size
    if steps_per_epoch == 0:
        raise ValidationError(
            f"batch_size {cfg.batch_size} exceeds dataset size {n}"
        )
    total_steps = steps_per_epoch * cfg.epochs

    if params is None:
        params = denoiser.init_params(denoiser_cfg, cfg.seed)
    if opt_state is None:
        opt_state = OptimizerState.fresh(params.param_count, params.values.dtype)
    last_epoch = cfg.epochs if stop_epoch is None else stop_epoch
    if not start_epoch < last_epoch <= cfg.epochs:
        raise ValidationError(
            f"need start_epoch < stop_epoch <= epochs, got "
            f"{start_epoch}, {last_epoch}, {cfg.epochs}"
        )

    log = []
    epoch_losses = []
    first_epoch_loss = None
    diverged_streak = 0
    for epoch in range(start_epoch, last_epoch):
        perm = keyed_rng(cfg.seed, "shuffle", epoch).permutation(n)
        running = 0.0
        for b in range(steps_per_epoch):
            global_step = epoch * steps_per_epoch + b
            idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            x0 = dataset[idx]
            t = keyed_rng(cfg.seed, "steps", global_step).integers(
                1, s.T + 1, size=cfg.batch_size
            )
            eps = _draw_batch_noise(
                x0.shape, cfg.training_noise, pyramid_cfg, cfg.seed, global_step
            )
            loss, grad = _batch_loss_and_grad(params, x0, t, eps, s)
            if not math.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, step {global_step}"
                )
            lr = lr_at(global_step, total_steps, cfg)
            params, opt_state = adamw_step(params, grad, opt_state, lr, cfg)
            running += loss
            log.append((global_step, epoch, lr, loss))
        epoch_mean = running / steps_per_epoch
        epoch_losses.append(epoch_mean)
        if first_epoch_loss is None:
            first_epoch_loss = epoch_mean
        diverged_streak = diverged_streak + 1 if epoch_mean > 10.0 * first_epoch_loss else 0
        if diverged_streak >= 3:
            raise TrainingError(
                f"loss exceeded 10x the first-epoch mean for 3 consecutive "
                f"epochs (epoch {epoch}: {epoch_mean:.4g} vs {first_epoch_loss:.4g})"
            )
        if epoch_callback is not None:
            epoch_callback(epoch, epoch_mean, params, opt_state)
    return TrainResult(params=params, opt_state=opt_state, log=log, epoch_losses=epoch_losses)
