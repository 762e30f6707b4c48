"""Latent diffusion: noise schedule, forward corruption and conditional reverse refinement.

Timesteps are 1-based throughout (``t = 1..T``) to match the usual DDPM
indexing; schedule arrays are stored 0-based so ``alpha[t - 1]`` is alpha_t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ContractError, DimensionError
from .numerics import Tensor, as_tensor, concat, l1_loss, leaky_relu, linear

NoisePredictor = Callable[[Tensor, Tensor, int], Tensor]


@dataclass(frozen=True)
class DiffusionSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ContractError(f"timestep {t} outside 1..{self.T}")

    def dump(self) -> str:
        """One ``t beta alpha alpha_bar`` line per step."""
        return "\n".join(f"{t} {self.beta[t - 1]:.17g} {self.alpha[t - 1]:.17g} {self.alpha_bar[t - 1]:.17g}"
                         for t in range(1, self.T + 1))


def make_schedule(T: int = 8, beta_start: float = 0.1, beta_end: float = 0.99) -> DiffusionSchedule:
    """Linearly increasing betas; cumulative products taken left to right."""
    if T < 1:
        raise ContractError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ContractError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        step = (beta_end - beta_start) / (T - 1)
        beta = np.array([beta_start + (t - 1) * step for t in range(1, T + 1)], dtype=np.float64)
        beta[-1] = beta_end
    alpha = 1.0 - beta
    alpha_bar = np.empty(T)
    acc = 1.0
    for i, a in enumerate(alpha):
        acc = acc * a
        alpha_bar[i] = acc
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return DiffusionSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def forward_diffuse(z, schedule: DiffusionSchedule, t: int, eps) -> Tensor:
    """``sqrt(abar_t) z + sqrt(1 - abar_t) eps``."""
    schedule.check_t(t)
    z, eps = as_tensor(z), as_tensor(eps)
    if z.shape != eps.shape:
        raise DimensionError(f"noise shape {eps.shape} != latent shape {z.shape}")
    ab = schedule.alpha_bar[t - 1]
    return z * math.sqrt(ab) + eps * math.sqrt(1.0 - ab)


def reverse_step(z_t, cond, t: int, schedule: DiffusionSchedule, denoiser: NoisePredictor, noise=None) -> Tensor:
    """One conditional denoising step from ``z_t`` to ``z_{t-1}``.

    The injected noise is scaled by the fixed ``sqrt(1 - alpha_t)``; pass
    ``noise=None`` for a deterministic step.
    """
    schedule.check_t(t)
    z_t = as_tensor(z_t)
    a = schedule.alpha[t - 1]
    ab = schedule.alpha_bar[t - 1]
    eps_hat = denoiser(z_t, cond, t)
    if eps_hat.shape != z_t.shape:
        raise DimensionError(f"denoiser output {eps_hat.shape} != latent {z_t.shape}")
    out = (z_t - eps_hat * ((1.0 - a) / math.sqrt(1.0 - ab))) * (1.0 / math.sqrt(a))
    if noise is not None:
        noise = as_tensor(noise)
        if noise.shape != z_t.shape:
            raise DimensionError(f"noise shape {noise.shape} != latent {z_t.shape}")
        out = out + noise * math.sqrt(1.0 - a)
    return out


def denoise_loop(z_start, cond, schedule: DiffusionSchedule, denoiser: NoisePredictor,
                 rng: np.random.Generator | None = None, t_start: int | None = None) -> Tensor:
    """Run reverse steps ``t_start..1`` (default ``T..1``) and return the final estimate.

    Fresh Gaussian noise from ``rng`` is injected at every step except the
    last; with ``rng=None`` every step is deterministic.
    """
    t_start = schedule.T if t_start is None else t_start
    schedule.check_t(t_start)
    z = as_tensor(z_start)
    for t in range(t_start, 0, -1):
        noise = None
        if rng is not None and t > 1:
            noise = Tensor(rng.standard_normal(z.shape).astype(z.dtype))
        z = reverse_step(z, cond, t, schedule, denoiser, noise)
    return z


def sample_prior(shape, rng: np.random.Generator, dtype=np.float32) -> Tensor:
    """Gaussian starting latent for inference."""
    return Tensor(rng.standard_normal(shape).astype(dtype))


def stage2_loss(z, z_hat) -> Tensor:
    """Mean absolute error between target latent and the reverse-chain estimate."""
    z, z_hat = as_tensor(z), as_tensor(z_hat)
    if z.shape != z_hat.shape:
        raise DimensionError(f"latent shapes differ: {z.shape} vs {z_hat.shape}")
    return l1_loss(z, z_hat)


def timestep_embedding(t: int, dim: int, T: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal embedding of an integer timestep."""
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / max(half, 1))
    args = (t / T) * 100.0 * freqs
    emb = np.concatenate([np.sin(args), np.cos(args)])
    if dim % 2:
        emb = np.concatenate([emb, [0.0]])
    return emb.astype(dtype)


class Denoiser:
    """Noise predictor: five linear layers applied per latent position.

    Input per position is ``[noisy latent | condition | timestep embedding]``.
    """

    n_layers = 5

    def __init__(self, latent_dim: int, cond_dim: int, hidden: int, T: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.latent_dim = latent_dim
        self.cond_dim = cond_dim
        self.T = T
        dims = [2 * latent_dim + cond_dim] + [hidden] * (self.n_layers - 1) + [latent_dim]
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            scale = math.sqrt(2.0 / fan_in) if i < self.n_layers - 1 else 0.1 * math.sqrt(1.0 / fan_in)
            self.weights.append(Tensor(rng.normal(0.0, scale, size=(fan_out, fan_in)).astype(dtype), requires_grad=True))
            self.biases.append(Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True))

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out += [(f"fc{i}.weight", w), (f"fc{i}.bias", b)]
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def __call__(self, z_t: Tensor, cond: Tensor, t: int) -> Tensor:
        n, c, h, w = z_t.shape
        if cond.shape != (n, self.cond_dim, h, w):
            raise DimensionError(f"condition {cond.shape} does not match latent grid {z_t.shape}")
        rows_z = z_t.transpose(0, 2, 3, 1).reshape(n * h * w, c)
        rows_c = cond.transpose(0, 2, 3, 1).reshape(n * h * w, self.cond_dim)
        emb = np.broadcast_to(timestep_embedding(t, self.latent_dim, self.T, z_t.dtype), (n * h * w, self.latent_dim))
        x = concat([rows_z, rows_c, Tensor(emb.copy())], axis=1)
        for i, (wt, b) in enumerate(zip(self.weights, self.biases)):
            x = linear(x, wt, b)
            if i < self.n_layers - 1:
                x = leaky_relu(x, 0.1)
        return x.reshape(n, h, w, c).transpose(0, 3, 1, 2)
