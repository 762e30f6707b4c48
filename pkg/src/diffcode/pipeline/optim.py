"""Adam with a cosine-annealed learning rate."""

from __future__ import annotations

import math

import numpy as np

from ..numerics import Tensor


def cosine_lr(step: int, iters: int, lr_start: float, lr_end: float) -> float:
    """Cosine arc from ``lr_start`` at step 0 to ``lr_end`` at step ``iters`` (endpoints exact)."""
    if step <= 0:
        return lr_start
    if step >= iters:
        return lr_end
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * step / iters))


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``; return the raw norm."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
    return norm


class Adam:
    def __init__(self, params: list[Tensor], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = [0] * len(self.params)
        self._index = {id(p): i for i, p in enumerate(self.params)}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        """Update every parameter that received a gradient; others keep their state untouched."""
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.t[i] += 1
            t = self.t[i]
            m = self.m[i]
            v = self.v[i]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            mhat = m / (1.0 - self.b1 ** t)
            vhat = v / (1.0 - self.b2 ** t)
            p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)

    def reset_rows(self, param: Tensor, rows: np.ndarray) -> None:
        i = self._index[id(param)]
        self.m[i][rows] = 0.0
        self.v[i][rows] = 0.0
