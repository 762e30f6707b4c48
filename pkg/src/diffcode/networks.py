"""Encoders, decoder, task classifier and the expert-routed restoration backbone."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractError, DimensionError
from .numerics import (
    Tensor,
    channel_norm,
    clip,
    concat,
    conv2d,
    global_avg_pool,
    l1_loss,
    leaky_relu,
    linear,
    upsample_nearest,
)
from .routing import GatingVector, TarmLayer, tarm_forward


@dataclass
class StageConfig:
    blocks_per_level: list[int] = field(default_factory=lambda: [1, 1, 2, 2])
    channels_per_level: list[int] = field(default_factory=lambda: [16, 32, 64, 64])
    latent_downsample: int = 8

    def __post_init__(self):
        if len(self.blocks_per_level) != len(self.channels_per_level):
            raise ContractError("blocks_per_level and channels_per_level differ in length")
        if self.latent_downsample != 2 ** (len(self.channels_per_level) - 1):
            raise ContractError(
                f"latent_downsample {self.latent_downsample} inconsistent with "
                f"{len(self.channels_per_level)} levels (expected {2 ** (len(self.channels_per_level) - 1)})")

    @property
    def levels(self) -> int:
        return len(self.channels_per_level)

    def to_dict(self) -> dict:
        return asdict(self)


class Module:
    """Parameter container; parameters and child modules are discovered by attribute order."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            out += _collect(value, prefix + name)
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise ContractError(f"missing parameter {name}")
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: stored shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False


def _collect(value, name: str) -> list[tuple[str, Tensor]]:
    if isinstance(value, Tensor):
        return [(name, value)] if value.requires_grad or value.name == "param" else []
    if isinstance(value, Module):
        return value.named_parameters(name + ".")
    if isinstance(value, TarmLayer):
        return [pair for i, e in enumerate(value.experts) for pair in _collect(e, f"{name}.expert{i}")]
    if isinstance(value, (list, tuple)):
        return [pair for i, v in enumerate(value) for pair in _collect(v, f"{name}.{i}")]
    return []


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True, name="param")


class Conv(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 groups: int = 1, dtype=np.float32, gain: float = 1.0):
        fan_in = cin // groups * k * k
        std = gain * math.sqrt(2.0 / fan_in)
        self.weight = _param(rng.normal(0.0, std, size=(cout, cin // groups, k, k)).astype(dtype))
        self.bias = _param(np.zeros(cout, dtype=dtype))
        self._stride, self._pad, self._groups = stride, k // 2, groups

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self._stride, pad=self._pad, groups=self._groups)


class SimpleGatedBlock(Module):
    """Shape-preserving block: norm, pointwise expand, depthwise conv, channel-split gate,
    pointwise project, residual add."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        self.norm_scale = _param(np.ones((1, channels, 1, 1), dtype=dtype))
        self.norm_shift = _param(np.zeros((1, channels, 1, 1), dtype=dtype))
        self.expand = Conv(channels, 2 * channels, 1, rng, dtype=dtype)
        self.depthwise = Conv(2 * channels, 2 * channels, 3, rng, groups=2 * channels, dtype=dtype)
        self.project = Conv(channels, channels, 1, rng, dtype=dtype, gain=0.5)
        self._c = channels

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self._c:
            raise DimensionError(f"block expects {self._c} channels, got {x.shape[1]}")
        y = channel_norm(x) * self.norm_scale + self.norm_shift
        y = self.depthwise(self.expand(y))
        y = y[:, :self._c] * y[:, self._c:]
        return x + self.project(y)


class Encoder(Module):
    """Image -> latent grid downsampled by ``2 ** (levels - 1)``."""

    def __init__(self, config: StageConfig, in_channels: int, out_channels: int,
                 rng: np.random.Generator, dtype=np.float32):
        ch = config.channels_per_level
        self.config = config
        self.stem = Conv(in_channels, ch[0], 3, rng, dtype=dtype)
        self.levels = [[SimpleGatedBlock(ch[i], rng, dtype) for _ in range(nb)]
                       for i, nb in enumerate(config.blocks_per_level)]
        self.down = [Conv(ch[i], ch[i + 1], 3, rng, stride=2, dtype=dtype) for i in range(config.levels - 1)]
        self.head = Conv(ch[-1], out_channels, 1, rng, dtype=dtype, gain=0.1)

    def __call__(self, image: Tensor) -> Tensor:
        r = self.config.latent_downsample
        if image.ndim != 4 or image.shape[2] % r or image.shape[3] % r:
            raise DimensionError(f"image {image.shape} not divisible by downsample factor {r}")
        x = self.stem(image)
        for i, blocks in enumerate(self.levels):
            for blk in blocks:
                x = blk(x)
            if i < len(self.down):
                x = self.down[i](x)
        return self.head(x)


class Decoder(Module):
    """Latent grid -> single-channel image clamped to [0, 1]."""

    def __init__(self, config: StageConfig, latent_channels: int, rng: np.random.Generator, dtype=np.float32):
        ch = config.channels_per_level
        self.config = config
        self.latent_channels = latent_channels
        self.stem = Conv(latent_channels, ch[-1], 1, rng, dtype=dtype)
        self.levels = [[SimpleGatedBlock(ch[i], rng, dtype) for _ in range(nb)]
                       for i, nb in reversed(list(enumerate(config.blocks_per_level)))]
        self.up = [Conv(ch[i + 1], ch[i], 3, rng, dtype=dtype) for i in reversed(range(config.levels - 1))]
        self.head = Conv(ch[0], 1, 3, rng, dtype=dtype, gain=0.1)

    def __call__(self, z: Tensor) -> Tensor:
        if z.ndim != 4 or z.shape[1] != self.latent_channels:
            raise DimensionError(f"latent {z.shape} does not have {self.latent_channels} channels")
        x = self.stem(z)
        for i, blocks in enumerate(self.levels):
            for blk in blocks:
                x = blk(x)
            if i < len(self.up):
                x = self.up[i](upsample_nearest(x, 2))
        return clip(self.head(x) + 0.5, 0.0, 1.0)


class TaskClassifier(Module):
    """Full-resolution conv, two strided convs, global average pool, one logit per expert."""

    def __init__(self, num_experts: int, rng: np.random.Generator, width: int = 16, dtype=np.float32):
        self.convs = [Conv(1, width, 3, rng, dtype=dtype),
                      Conv(width, 2 * width, 3, rng, stride=2, dtype=dtype),
                      Conv(2 * width, 2 * width, 3, rng, stride=2, dtype=dtype)]
        self.fc_weight = _param(rng.normal(0.0, 1.0 / math.sqrt(2 * width), size=(num_experts, 2 * width)).astype(dtype))
        self.fc_bias = _param(np.zeros(num_experts, dtype=dtype))

    def __call__(self, image: Tensor) -> Tensor:
        x = image
        for conv in self.convs:
            x = leaky_relu(conv(x), 0.1)
        return linear(global_avg_pool(x), self.fc_weight, self.fc_bias)


def classify_task(image: Tensor, classifier: TaskClassifier, k: int = 1) -> GatingVector:
    return GatingVector(classifier(image), k=k)


def _clones(block: Module, count: int) -> list[Module]:
    return [block] + [copy.deepcopy(block) for _ in range(count - 1)]


class RestorationNet(Module):
    """U-shaped backbone on ``concat(I_lq, I_ref)`` with one expert layer per level.

    Expert layers sit at the bottleneck and after each decoder level; every
    one of them is driven by the same per-sample gating vector.
    """

    def __init__(self, config: StageConfig, num_experts: int, rng: np.random.Generator, dtype=np.float32):
        ch = config.channels_per_level
        self.config = config
        self.num_experts = num_experts
        self.stem = Conv(2, ch[0], 3, rng, dtype=dtype)
        # the reference channel starts switched off and is learned in from zero
        self.stem.weight.data[:, 1] = 0.0
        self.enc = [[SimpleGatedBlock(ch[i], rng, dtype) for _ in range(nb)]
                    for i, nb in enumerate(config.blocks_per_level[:-1])]
        self.down = [Conv(ch[i], ch[i + 1], 3, rng, stride=2, dtype=dtype) for i in range(config.levels - 1)]
        self.mid = [SimpleGatedBlock(ch[-1], rng, dtype) for _ in range(config.blocks_per_level[-1])]
        self.up = [Conv(ch[i + 1], ch[i], 3, rng, dtype=dtype) for i in reversed(range(config.levels - 1))]
        self.dec = [[SimpleGatedBlock(ch[i], rng, dtype) for _ in range(config.blocks_per_level[i])]
                    for i in reversed(range(config.levels - 1))]
        levels_out = [ch[-1]] + [ch[i] for i in reversed(range(config.levels - 1))]
        self.head = Conv(ch[0], 1, 3, rng, dtype=dtype, gain=0.1)
        # experts drawn last and cloned from one draw, so the network computes the same
        # function at initialisation for any expert count
        self.tarms = [TarmLayer(_clones(SimpleGatedBlock(c, rng, dtype), num_experts)) for c in levels_out]

    def __call__(self, i_lq: Tensor, i_ref: Tensor, gate: GatingVector) -> Tensor:
        if i_lq.shape != i_ref.shape:
            raise DimensionError(f"LQ {i_lq.shape} and reference {i_ref.shape} differ")
        if i_lq.shape[1] != 1:
            raise DimensionError("restoration expects single-channel images")
        x = self.stem(concat([i_lq, i_ref], axis=1))
        skips = []
        for i, blocks in enumerate(self.enc):
            for blk in blocks:
                x = blk(x)
            skips.append(x)
            x = self.down[i](x)
        for blk in self.mid:
            x = blk(x)
        x = tarm_forward(x, gate, self.tarms[0])
        for j, (up, blocks) in enumerate(zip(self.up, self.dec)):
            x = up(upsample_nearest(x, 2)) + skips[-1 - j]
            for blk in blocks:
                x = blk(x)
            x = tarm_forward(x, gate, self.tarms[j + 1])
        return clip(i_lq + self.head(x), 0.0, 1.0)


def encode_vq(image: Tensor, encoder: Encoder) -> Tensor:
    return encoder(image)


def decode_vq(z_q: Tensor, decoder: Decoder) -> Tensor:
    return decoder(z_q)


def encode_condition(image: Tensor, cond_encoder: Encoder) -> Tensor:
    return cond_encoder(image)


def restore(i_lq: Tensor, i_ref: Tensor, gate: GatingVector, net: RestorationNet) -> Tensor:
    return net(i_lq, i_ref, gate)


def stage3_loss(i_hq: Tensor, i_hat: Tensor) -> Tensor:
    """Mean absolute restoration error."""
    return l1_loss(i_hq, i_hat)
