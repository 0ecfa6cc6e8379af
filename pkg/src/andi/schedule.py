"""Noise schedule and closed-form diffusion quantities.

Timesteps are 1-indexed: step t maps x_{t-1} to x_t, and the cumulative
signal factor at t=0 is defined as 1 (no noising). Schedule arrays are
kept in float64 so the cumulative products stay accurate at T=1000;
per-step coefficients are cast to the image dtype only when applied, so
float32 pipelines do float32 elementwise math while float64 inputs get
full-precision results.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

__all__ = [
    "NoiseSchedule",
    "TimeRange",
    "linear_beta_schedule",
    "forward_noise",
    "posterior_mean",
    "mu_from_eps",
    "posterior_variance",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed per-step diffusion rates, indexed directly by t.

    ``beta[t]``, ``alpha[t]`` and ``posterior_var[t]`` are defined for
    t in 1..T (index 0 holds the identity step: beta 0, alpha 1);
    ``alpha_bar[t]`` is defined for t in 0..T with ``alpha_bar[0] == 1``.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray

    def check_step(self, t: int) -> int:
        if not isinstance(t, (int, np.integer)) or not 1 <= t <= self.T:
            raise ValidationError(f"timestep must be in [1, {self.T}], got {t!r}")
        return int(t)


@dataclass(frozen=True)
class TimeRange:
    """Inclusive evaluation range [t_low, t_high] of denoising steps."""

    t_low: int = 75
    t_high: int = 200

    def __post_init__(self):
        if not 1 <= self.t_low <= self.t_high:
            raise ValidationError(
                f"need 1 <= t_low <= t_high, got [{self.t_low}, {self.t_high}]"
            )

    def steps(self) -> range:
        return range(self.t_low, self.t_high + 1)

    def __len__(self) -> int:
        return self.t_high - self.t_low + 1

    def check_schedule(self, s: NoiseSchedule) -> None:
        if self.t_high > s.T:
            raise ValidationError(
                f"t_high {self.t_high} exceeds schedule length T={s.T}"
            )


def linear_beta_schedule(
    T: int = 1000, beta_1: float = 1e-4, beta_T: float = 0.02
) -> NoiseSchedule:
    """Endpoint-inclusive linear beta schedule with all derived arrays."""
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValidationError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_1 <= beta_T < 1.0):
        raise ValidationError(
            f"need 0 < beta_1 <= beta_T < 1, got beta_1={beta_1}, beta_T={beta_T}"
        )
    T = int(T)
    beta = np.zeros(T + 1, dtype=np.float64)
    beta[1:] = np.linspace(beta_1, beta_T, T) if T > 1 else beta_1
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)  # alpha[0] == 1 makes alpha_bar[0] == 1
    posterior_var = np.zeros(T + 1, dtype=np.float64)
    posterior_var[1:] = (
        (1.0 - alpha[1:]) * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:])
    )
    return NoiseSchedule(
        T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, posterior_var=posterior_var
    )


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValidationError(f"{what}: shape {b.shape} does not match {a.shape}")


def forward_noise(x0: np.ndarray, t: int, eps: np.ndarray, s: NoiseSchedule):
    """Noise x_0 to step t: x_t = sqrt(abar_t) * x_0 + sqrt(1 - abar_t) * eps."""
    t = s.check_step(t)
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    _check_same_shape(x0, eps, "forward_noise")
    ab = s.alpha_bar[t]
    c_sig = x0.dtype.type(np.sqrt(ab))
    c_noise = x0.dtype.type(np.sqrt(1.0 - ab))
    return c_sig * x0 + c_noise * eps


def posterior_mean(x_t: np.ndarray, x0: np.ndarray, t: int, s: NoiseSchedule):
    """Exact backward-transition mean mu_q(x_t, x_0) at step t.

    mu_q = sqrt(alpha_t)(1 - abar_{t-1})/(1 - abar_t) * x_t
         + sqrt(abar_{t-1})(1 - alpha_t)/(1 - abar_t) * x_0
    """
    t = s.check_step(t)
    x_t = np.asarray(x_t)
    x0 = np.asarray(x0)
    _check_same_shape(x_t, x0, "posterior_mean")
    a_t = s.alpha[t]
    ab_t = s.alpha_bar[t]
    ab_prev = s.alpha_bar[t - 1]
    denom = 1.0 - ab_t
    c_xt = x_t.dtype.type(np.sqrt(a_t) * (1.0 - ab_prev) / denom)
    c_x0 = x_t.dtype.type(np.sqrt(ab_prev) * (1.0 - a_t) / denom)
    return c_xt * x_t + c_x0 * x0


def mu_from_eps(x_t: np.ndarray, eps_pred: np.ndarray, t: int, s: NoiseSchedule):
    """Predicted transition mean from a noise estimate.

    mu = (x_t - beta_t / sqrt(1 - abar_t) * eps_pred) / sqrt(alpha_t).
    The result is returned as-is: no clipping or clamping at any step.
    """
    t = s.check_step(t)
    x_t = np.asarray(x_t)
    eps_pred = np.asarray(eps_pred)
    _check_same_shape(x_t, eps_pred, "mu_from_eps")
    c_inv = x_t.dtype.type(1.0 / np.sqrt(s.alpha[t]))
    c_eps = x_t.dtype.type(s.beta[t] / np.sqrt(1.0 - s.alpha_bar[t]))
    return c_inv * (x_t - c_eps * eps_pred)


def posterior_variance(t: int, s: NoiseSchedule) -> float:
    """Scalar variance of the exact backward transition at step t."""
    t = s.check_step(t)
    return float(s.posterior_var[t])
