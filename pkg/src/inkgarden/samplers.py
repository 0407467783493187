"""Reverse-process steppers: stochastic DDPM and deterministic PNDM.

The PNDM stepper follows the pseudo-numerical recipe: the first three
transitions run a Runge-Kutta-style warmup (three extra model calls each),
after which four stored noise predictions drive the 4th-order linear
multistep combination (55, -59, 37, -9)/24.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolationError, SamplerStateError, TimestepError
from .schedule import NoiseSchedule


def ddpm_step(schedule: NoiseSchedule, x_t, eps_hat, t, z):
    """x_{t-1} = (x_t - beta_t/sqrt(1-abar_t) eps_hat)/sqrt(alpha_t) + sqrt(beta_t) z.

    The final step (t=1) is deterministic: callers must pass z = 0 there.
    """
    t = schedule.validate_t(t)
    x_t = np.asarray(x_t)
    z = np.asarray(z)
    if t == 1 and np.any(z != 0):
        raise ContractViolationError("ddpm_step at t=1 requires z = 0")
    dt = x_t.dtype.type
    beta = schedule.betas[t]
    mean = (x_t - dt(beta / np.sqrt(1.0 - schedule.alpha_bars[t])) * eps_hat) / dt(
        np.sqrt(schedule.alphas[t])
    )
    return mean + dt(np.sqrt(beta)) * z


def pndm_transfer(schedule: NoiseSchedule, x, eps, t, t_next):
    """Deterministic transfer phi(x, eps, t, t_next) between noise levels."""
    abar_t = schedule.alpha_bars[t]
    abar_n = schedule.alpha_bars[t_next]
    dt = np.asarray(x).dtype.type
    coef = (abar_n - abar_t) / (
        np.sqrt(abar_t) * (np.sqrt((1.0 - abar_n) * abar_t) + np.sqrt((1.0 - abar_t) * abar_n))
    )
    return dt(np.sqrt(abar_n / abar_t)) * x - dt(coef) * eps


class SamplerRun:
    """Ordered state for one PNDM trajectory.

    Holds the schedule, the decreasing timestep sub-sequence, the ring buffer
    of up to four past noise predictions, and the model's noise-prediction
    callable used for warmup substeps.
    """

    def __init__(self, schedule: NoiseSchedule, step_indices, eps_fn, rng_seed=0):
        step_indices = [int(t) for t in step_indices]
        if any(a <= b for a, b in zip(step_indices, step_indices[1:])):
            raise SamplerStateError(f"step indices must be strictly decreasing: {step_indices}")
        if step_indices and not 1 <= step_indices[-1] <= step_indices[0] <= schedule.T:
            raise TimestepError(f"step indices outside [1, {schedule.T}]: {step_indices}")
        self.schedule = schedule
        self.step_indices = step_indices
        self.eps_fn = eps_fn
        self.eps_history = []
        self.rng_seed = rng_seed
        self._prev_t = None


def pndm_step(run: SamplerRun, x_t, eps_hat, t, t_next):
    """Advance one PNDM transition from t to t_next (0 means the clean sample).

    The raw eps_hat enters the history; warmup transitions compute the
    effective epsilon via pseudo-Runge-Kutta substeps, steady-state ones via
    the linear multistep combination over the stored history.
    """
    if not (t > t_next >= 0):
        raise SamplerStateError(f"need t > t_next >= 0, got {t} -> {t_next}")
    if run._prev_t is not None and t >= run._prev_t:
        raise SamplerStateError(f"non-monotone timestep sequence: {run._prev_t} then {t}")
    run._prev_t = t
    sched = run.schedule
    sched.validate_t(t)

    run.eps_history.append(eps_hat)
    if len(run.eps_history) > 4:
        run.eps_history.pop(0)

    if len(run.eps_history) < 4:
        t_mid = (t + t_next) // 2
        e1 = eps_hat
        x1 = pndm_transfer(sched, x_t, e1, t, t_mid)
        e2 = run.eps_fn(x1, t_mid)
        x2 = pndm_transfer(sched, x_t, e2, t, t_mid)
        e3 = run.eps_fn(x2, t_mid)
        x3 = pndm_transfer(sched, x_t, e3, t, t_next)
        e4 = run.eps_fn(x3, t_next)
        eps_prime = (e1 + 2.0 * e2 + 2.0 * e3 + e4) / 6.0
    else:
        e = run.eps_history
        eps_prime = (55.0 * e[-1] - 59.0 * e[-2] + 37.0 * e[-3] - 9.0 * e[-4]) / 24.0
    return pndm_transfer(sched, x_t, eps_prime, t, t_next)
