"""Run configuration.

Configs are plain dataclasses that round-trip through JSON. Seeds and paths
can be overridden from the environment (``DIFFCODE_SEED``,
``DIFFCODE_OUT_DIR``, ``DIFFCODE_DATA_DIR``).
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from ..networks import StageConfig

ENV_PREFIX = "DIFFCODE_"
REFERENCE_MODES = ("none", "direct", "diffusion")


@dataclass
class DataConfig:
    size: int = 32
    n_train: int = 64
    n_val: int = 8
    n_test: int = 16
    tasks: list[int] = field(default_factory=lambda: [0, 1, 2])


@dataclass
class CodebookConfig:
    size: int = 256
    dim: int = 32
    depth: int = 8
    delta: float = 0.25
    dead_code_patience: int = 200
    warmup_images: int = 32
    warmup_iters: int = 0    # autoencoder steps on the continuous latent before codes are seeded
    shared: bool = False     # one codebook for all tasks instead of a per-task bank


@dataclass
class DiffusionConfig:
    T: int = 8
    beta_start: float = 0.1
    beta_end: float = 0.99
    hidden: int = 128


@dataclass
class RoutingConfig:
    enabled: bool = True
    experts: int = 4
    k: int = 1
    aux_weight: float = 0.1
    classifier_width: int = 16


@dataclass
class OptimConfig:
    lr_start: float = 2e-4
    lr_end: float = 1e-6
    batch: int = 8
    iters: int = 2000
    clip_norm: float = 0.0   # global gradient-norm clip, 0 disables


@dataclass
class RunConfig:
    stage: int = 1
    seed: int = 0
    dtype: str = "float32"
    data: DataConfig = field(default_factory=DataConfig)
    model: StageConfig = field(default_factory=StageConfig)
    codebook: CodebookConfig = field(default_factory=CodebookConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    routing: RoutingConfig = field(default_factory=RoutingConfig)
    stage1: OptimConfig = field(default_factory=OptimConfig)
    stage2: OptimConfig = field(default_factory=OptimConfig)
    stage3: OptimConfig = field(default_factory=OptimConfig)
    reference: str = "diffusion"   # none | direct | diffusion
    peak: float = 1.0
    out_dir: str = "runs/default"
    data_dir: str | None = None

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ConfigError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.reference not in REFERENCE_MODES:
            raise ConfigError(f"reference must be one of {REFERENCE_MODES}, got {self.reference!r}")
        if self.routing.enabled and not 1 <= self.routing.k <= self.routing.experts:
            raise ConfigError(f"routing k={self.routing.k} outside 1..{self.routing.experts}")
        if self.routing.experts < len(self.data.tasks) and (self.routing.enabled or self.reference != "none"):
            raise ConfigError("need at least one expert logit per task")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d)

    def replace(self, **changes) -> "RunConfig":
        d = copy.deepcopy(self.to_dict())
        for key, value in changes.items():
            target = d
            parts = key.split(".")
            for p in parts[:-1]:
                target = target[p]
            if parts[-1] not in target:
                raise ConfigError(f"unknown config key {key!r}")
            target[parts[-1]] = value
        return RunConfig.from_dict(d)


def _build(cls, d: dict):
    if not isinstance(d, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(d).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else None
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def apply_env(config: RunConfig, environ=None) -> RunConfig:
    env = os.environ if environ is None else environ
    changes = {}
    if ENV_PREFIX + "SEED" in env:
        changes["seed"] = int(env[ENV_PREFIX + "SEED"])
    if ENV_PREFIX + "OUT_DIR" in env:
        changes["out_dir"] = env[ENV_PREFIX + "OUT_DIR"]
    if ENV_PREFIX + "DATA_DIR" in env:
        changes["data_dir"] = env[ENV_PREFIX + "DATA_DIR"]
    return config.replace(**changes) if changes else config


def load_config(path: str | Path | None, environ=None) -> RunConfig:
    cfg = RunConfig() if path is None else RunConfig.from_dict(json.loads(Path(path).read_text()))
    return apply_env(cfg, environ)


def full_scale_config() -> RunConfig:
    """Full-size hyperparameters: 128-pixel patches and wide networks (far beyond a desk run)."""
    return RunConfig(
        data=DataConfig(size=128),
        model=StageConfig([2, 2, 4, 4], [64, 128, 256, 256], 8),
        codebook=CodebookConfig(size=8192, dim=256, depth=8),
    )
