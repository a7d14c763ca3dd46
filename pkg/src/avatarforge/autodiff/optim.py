"""Adam and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params[i].data``.

    ``grads[i]`` may be None (treated as zero).
    """
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        upd = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= upd.astype(p.data.dtype, copy=False)
    return state


def lr_schedule(step: int, total: int, base_lr: float, warmup: int) -> float:
    """Linear ramp from 0 to ``base_lr`` over ``warmup`` steps, then cosine decay to 0 at ``total``."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if warmup > 0 and step < warmup:
        return base_lr * step / warmup
    span = total - warmup
    if span <= 0:
        return base_lr
    frac = (step - warmup) / span
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * frac))
