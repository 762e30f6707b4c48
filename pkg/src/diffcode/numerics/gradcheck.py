"""Central finite-difference checks for analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn()`` with respect to every element of ``x``.

    ``x.data`` is perturbed in place and restored afterwards.
    """
    grad = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn().data)
        flat[i] = orig - h
        down = float(fn().data)
        flat[i] = orig
        grad.reshape(-1)[i] = (up - down) / (2.0 * h)
    return grad


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
              rtol: float = 1e-4, atol: float = 1e-8) -> float:
    """Compare analytic and numerical gradients; return the worst relative error.

    Relative error per element is ``|a - n| / max(|a|, |n|, atol / rtol)`` so that
    entries that are zero on both routes do not blow up the ratio.
    Raises ``AssertionError`` if any element exceeds ``rtol``.
    """
    for x in inputs:
        x.grad = None
    backward(fn())
    worst = 0.0
    for x in inputs:
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
        numeric = numerical_grad(fn, x, h)
        scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol / rtol)
        err = np.abs(analytic - numeric) / scale
        worst = max(worst, float(err.max()) if err.size else 0.0)
    if worst >= rtol:
        raise AssertionError(f"gradient check failed: worst relative error {worst:.3e} >= {rtol:.0e}")
    return worst
