"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward


def numerical_gradients(fn, inputs, h: float = 1e-5) -> list[np.ndarray]:
    out = []
    for x in inputs:
        g = np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = fn(*inputs).item()
            flat[i] = old - h
            fm = fn(*inputs).item()
            flat[i] = old
            gf[i] = (fp - fm) / (2.0 * h)
        out.append(g)
    return out


def analytic_gradients(fn, inputs) -> list[np.ndarray]:
    for x in inputs:
        x.grad = None
        x.requires_grad = True
    loss = fn(*inputs)
    backward(loss)
    return [np.zeros_like(x.data) if x.grad is None else x.grad for x in inputs]


def max_relative_error(a: np.ndarray, n: np.ndarray, floor: float = 1e-6) -> float:
    """Elementwise |a - n| / max(|a|, |n|, floor), maximised."""
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check_gradients(fn, inputs: list[Tensor], h: float = 1e-5) -> float:
    """Max relative error between backward() and central differences over all inputs.

    ``fn(*inputs)`` must return a scalar Tensor; inputs should be float64.
    """
    ana = analytic_gradients(fn, inputs)
    num = numerical_gradients(fn, inputs, h)
    return max(max_relative_error(a, n) for a, n in zip(ana, num))
