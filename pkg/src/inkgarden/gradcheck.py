"""Finite-difference verification of backward passes.

Run in float64: central differences at epsilon=1e-5 have truncation error
around 1e-10 for smooth functions, far below float32 resolution.
"""

from __future__ import annotations

import numpy as np

from .tensor import no_grad


def finite_diff_check(fn, inputs, epsilon=1e-5, sample=None, seed=0):
    """Compare backward-pass gradients of ``fn(*inputs)`` to central differences.

    ``fn`` must return a scalar Tensor and be deterministic.  Every element of
    every input is perturbed by +/-epsilon unless ``sample`` caps the number of
    elements checked per input (a seeded uniform subsample, for large models).

    Returns the maximum relative error, with comparison denominators floored
    at 1e-8.  Reports only; never raises on disagreement.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.ravel()
        gflat = ga.ravel()
        idx = np.arange(flat.size)
        if sample is not None and flat.size > sample:
            idx = np.sort(rng.choice(flat.size, size=sample, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            with no_grad():
                f_plus = fn(*inputs).item()
            flat[i] = orig - epsilon
            with no_grad():
                f_minus = fn(*inputs).item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * epsilon)
            denom = max(abs(fd), abs(gflat[i]), 1e-8)
            worst = max(worst, abs(fd - gflat[i]) / denom)
    return worst
