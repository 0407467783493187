"""Noise schedules and the closed-form forward (noising) process.

Tables are 1-indexed by timestep with index 0 reserved: alphas[0] and
alpha_bars[0] are exactly 1 (betas[0] is an unused 0), so q_sample at t has
signal sqrt(alpha_bars[t]) and noise sqrt(1 - alpha_bars[t]).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, TimestepError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def validate_t(self, t):
        if not 1 <= t <= self.T:
            raise TimestepError(f"timestep {t} outside [1, {self.T}]")
        return int(t)


def make_linear_schedule(T, beta_start=1e-4, beta_end=0.02) -> NoiseSchedule:
    """Betas linearly interpolated inclusive of both endpoints over t = 1..T."""
    if T < 2:
        raise ConfigurationError(f"need T >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigurationError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.zeros(T + 1, dtype=np.float64)
    betas[1:] = np.linspace(beta_start, beta_end, T)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def schedule_from_alpha_bars(alpha_bars) -> NoiseSchedule:
    """Derive a (coarse) schedule from a given cumulative-alpha table.

    Used for strided stochastic sampling: the selected sub-sequence of
    timesteps becomes a T'=len-1 schedule with the same marginals.
    """
    alpha_bars = np.asarray(alpha_bars, dtype=np.float64)
    alphas = np.empty_like(alpha_bars)
    alphas[0] = 1.0
    alphas[1:] = alpha_bars[1:] / alpha_bars[:-1]
    betas = 1.0 - alphas
    betas[0] = 0.0
    return NoiseSchedule(T=len(alpha_bars) - 1, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def q_sample(schedule: NoiseSchedule, x0, t, eps):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, with eps supplied by the caller."""
    t = schedule.validate_t(t)
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    abar = schedule.alpha_bars[t]
    signal = x0.dtype.type(np.sqrt(abar))
    noise = x0.dtype.type(np.sqrt(1.0 - abar))
    return signal * x0 + noise * eps


def sampling_indices(T, steps):
    """Uniformly strided decreasing timesteps, starting at T; the sampler's
    final transition goes from the smallest index to t = 0."""
    if steps < 1 or steps > T:
        raise ConfigurationError(f"steps must be in [1, {T}], got {steps}")
    stride = T // steps
    return [T - i * stride for i in range(steps)]
