"""Bias-corrected Adam over named parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError


@dataclass
class AdamState:
    """Optimizer moments keyed by parameter name.

    ``step_count`` increments by exactly one per :func:`adam_step`; moment
    arrays are lazily allocated with the parameter's shape and dtype.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state: AdamState, grads=None):
    """Apply one Adam update to every trainable parameter.

    `grads` maps parameter name -> gradient array; when omitted, gradients are
    read from each parameter's tensor.  Non-trainable parameters are never
    touched (their bytes stay identical).  A NaN/Inf gradient aborts the step
    before any parameter is modified.
    """
    params = list(params)
    trainable = [p for p in params if p.trainable]
    resolved = []
    for p in trainable:
        g = grads.get(p.name) if grads is not None else p.value.grad
        if g is None:
            raise NonFiniteError(f"missing gradient for trainable parameter '{p.name}'")
        g = np.asarray(g)
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter '{p.name}'")
        resolved.append((p, g))

    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g in resolved:
        m = state.m.get(p.name)
        if m is None:
            m = np.zeros_like(p.value.data)
            v = np.zeros_like(p.value.data)
        else:
            v = state.v[p.name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[p.name] = m
        state.v[p.name] = v
        m_hat = m / bc1
        v_hat = v / bc2
        p.value.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.value.data.dtype)
    return state


def zero_grads(params):
    for p in params:
        p.value.grad = None
