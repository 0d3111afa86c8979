"""DDPM noise schedule, forward noising, reverse ancestral step, and the
epsilon-prediction MSE loss.

Timesteps are 1-indexed: t runs 1..T, with alpha_bar[0] corresponding to t=1.
All randomness (eps, step noise) is supplied by the caller, so every function
here is deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray  # (T,)
    alpha: np.ndarray  # 1 - beta
    alpha_bar: np.ndarray  # cumulative product of alpha

    def alpha_bar_prev(self, t: int) -> float:
        """alpha_bar at t-1, with the t=1 convention alpha_bar_0 = 1."""
        return 1.0 if t == 1 else float(self.alpha_bar[t - 2])


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                  kind: str = "linear") -> NoiseSchedule:
    if kind != "linear":
        raise ConfigError(f"unsupported schedule kind {kind!r}")
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def default_schedule(T: int = 200) -> NoiseSchedule:
    """Linear schedule with the 1000-step endpoints rescaled by 1000/T so the
    total accumulated noise (alpha_bar_T) is roughly preserved at small T."""
    scale = 1000.0 / T
    beta_end = min(0.02 * scale, 0.99)  # clamp keeps tiny-T debug schedules valid
    return make_schedule(T, min(1e-4 * scale, beta_end), beta_end)


def _check_t(s: NoiseSchedule, t: int):
    if not 1 <= t <= s.T:
        raise ValueError(f"t={t} outside 1..{s.T}")


def q_sample(x0, t: int, eps, s: NoiseSchedule):
    """Forward process: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    _check_t(s, t)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    ab = float(s.alpha_bar[t - 1])
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def predict_x0(x_t, t: int, eps, s: NoiseSchedule):
    """Analytic inverse of q_sample given the same eps."""
    _check_t(s, t)
    ab = float(s.alpha_bar[t - 1])
    return (x_t - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)


def reverse_step(eps_hat, x_t, t: int, s: NoiseSchedule, noise=None):
    """One DDPM ancestral step x_t -> x_{t-1} with fixed posterior variance.

    mean  = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)
    sigma^2 = beta_t * (1 - abar_{t-1}) / (1 - abar_t)

    At t=1 no noise is added; passing nonzero noise there is an error.
    """
    _check_t(s, t)
    if x_t.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: x_t {tuple(x_t.shape)} vs eps_hat {tuple(eps_hat.shape)}")
    beta_t = float(s.beta[t - 1])
    ab_t = float(s.alpha_bar[t - 1])
    mean = (x_t - beta_t / math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(float(s.alpha[t - 1]))
    if t == 1:
        if noise is not None and float(np.abs(np.asarray(noise)).max()) != 0.0:
            raise ValueError("noise must be zero at t=1")
        return mean
    if noise is None:
        return mean
    sigma = math.sqrt(beta_t * (1.0 - s.alpha_bar_prev(t)) / (1.0 - ab_t))
    return mean + sigma * noise


def training_loss(eps_hat, eps):
    """Mean squared error over all elements (the DDPM simple objective)."""
    if eps_hat.shape != eps.shape:
        raise ValueError(f"shape mismatch: {tuple(eps_hat.shape)} vs {tuple(eps.shape)}")
    diff = eps_hat - eps
    return (diff * diff).mean()
