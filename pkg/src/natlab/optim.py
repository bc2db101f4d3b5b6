"""Adaptive-moment optimizer and the inverse-sqrt learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import DTYPE, ParameterSet


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_init(params: ParameterSet) -> AdamState:
    state = AdamState()
    for name, t in params.items():
        state.m[name] = np.zeros_like(t.data)
        state.v[name] = np.zeros_like(t.data)
    return state


def adam_step(
    params: ParameterSet,
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.98),
    eps: float = 1e-9,
) -> AdamState:
    """One adaptive-moment update. Gradients are left untouched; the caller
    zeroes them. Updates are applied in parameter insertion order, so two
    runs with equal seeds produce bit-identical values."""
    for name, t in params.items():
        if t.grad is None:
            raise ValueError(f"optimizer_step: parameter {name!r} has no gradient")
        if state.m.get(name) is None or state.m[name].shape != t.data.shape:
            raise ValueError(f"optimizer_step: state does not match parameter {name!r}")
    b1, b2 = betas
    state.step += 1
    t_ = state.step
    bc1 = 1.0 - b1 ** t_
    bc2 = 1.0 - b2 ** t_
    for name, p in params.items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / np.float32(bc1)
        v_hat = v / np.float32(bc2)
        p.data -= (np.float32(lr) * m_hat / (np.sqrt(v_hat) + np.float32(eps))).astype(DTYPE)
    return state


def inverse_sqrt_lr(step: int, peak_lr: float, warmup_steps: int) -> float:
    """Linear warmup to peak_lr, then decay proportional to 1/sqrt(step)."""
    step = max(1, step)
    if warmup_steps <= 0:
        return peak_lr / math.sqrt(step)
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    return peak_lr * math.sqrt(warmup_steps / step)
