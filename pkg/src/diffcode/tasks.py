"""Synthetic all-in-one restoration tasks.

Three degradations stand in for the clinical tasks: 4x super-resolution,
additive Gaussian noise, and Poisson count thinning (low-dose emission
imaging). Each task also draws its clean images from its own procedural
family, so the clean-image statistics differ between tasks the way
different imaging modalities do.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ContractError
from .numerics import load_tensor, save_tensor
from .rng import stream

KINDS = ("downsample_sr", "additive_noise", "count_subsample")
STYLES = ("smooth", "piecewise", "hotspot")


@dataclass(frozen=True)
class DegradationSpec:
    task_id: int
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown degradation kind {self.kind!r}")


DEFAULT_TASKS = (
    DegradationSpec(0, "downsample_sr", {"scale": 4}),
    DegradationSpec(1, "additive_noise", {"sigma": 0.1}),
    DegradationSpec(2, "count_subsample", {"dose": 1.0 / 12.0, "peak_counts": 1200.0}),
)


@dataclass
class TaskSample:
    i_lq: np.ndarray
    i_hq: np.ndarray
    task_id: int
    sample_id: int


# ---------------------------------------------------------------------------
# clean images

def _normalise(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    lo, hi = img.min(), img.max()
    img = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    a, b = rng.uniform(0.0, 0.1), rng.uniform(0.9, 1.0)
    return a + (b - a) * img


def _smooth_field(rng, size: int, sigma: float) -> np.ndarray:
    f = gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return f / (f.std() + 1e-12)


def _ellipse(size: int, rng, r_range=(0.1, 0.35)) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    cy, cx = rng.uniform(0.15, 0.85, size=2)
    ry, rx = rng.uniform(*r_range, size=2)
    th = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(th) + dy * np.sin(th)
    v = -dx * np.sin(th) + dy * np.cos(th)
    return (u / rx) ** 2 + (v / ry) ** 2


def _render(style: str, size: int, rng: np.random.Generator) -> np.ndarray:
    if style == "smooth":
        img = _smooth_field(rng, size, size / 8) + 0.5 * _smooth_field(rng, size, size / 16)
        for _ in range(rng.integers(1, 4)):
            img += rng.uniform(1.0, 2.5) * rng.choice([-1, 1]) * np.exp(-_ellipse(size, rng) ** 2)
    elif style == "piecewise":
        img = 0.3 * _smooth_field(rng, size, size / 4)
        for _ in range(rng.integers(2, 6)):
            if rng.random() < 0.5:
                mask = _ellipse(size, rng) <= 1.0
            else:
                y0, x0 = rng.integers(0, size - 6, size=2)
                h, w = rng.integers(6, size // 2, size=2)
                mask = np.zeros((size, size), bool)
                mask[y0:y0 + h, x0:x0 + w] = True
            img[mask] = rng.uniform(-1.5, 1.5)
    elif style == "hotspot":
        img = 0.15 * _smooth_field(rng, size, size / 6)
        yy, xx = np.mgrid[0:size, 0:size]
        for _ in range(rng.integers(2, 7)):
            cy, cx = rng.uniform(3, size - 3, size=2)
            s = rng.uniform(1.0, size / 8)
            img += rng.uniform(0.5, 2.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    else:
        raise ContractError(f"unknown style {style!r}")
    return _normalise(img, rng)


def generate_hq(seed: int, count: int, size: int, task_id: int = 0, start: int = 0) -> list[np.ndarray]:
    """``count`` clean images in [0, 1]; image ``i`` depends only on ``(seed, task_id, start + i)``."""
    if size < 16:
        raise ContractError(f"size must be >= 16, got {size}")
    style = STYLES[task_id % len(STYLES)]
    return [_render(style, size, stream(seed, "hq", task_id, start + i)).astype(np.float32)
            for i in range(count)]


# ---------------------------------------------------------------------------
# degradations

def box_downsample(img: np.ndarray, scale: int) -> np.ndarray:
    h, w = img.shape
    if h % scale or w % scale:
        raise ContractError(f"image {img.shape} not divisible by scale {scale}")
    return img.reshape(h // scale, scale, w // scale, scale).mean(axis=(1, 3))


def degrade(i_hq: np.ndarray, spec: DegradationSpec, seed: int) -> np.ndarray:
    """Low-quality counterpart of ``i_hq``; never modifies its input."""
    img = np.asarray(i_hq, dtype=np.float64)
    rng = stream(seed, "degrade", spec.task_id)
    if spec.kind == "downsample_sr":
        s = int(spec.params.get("scale", 4))
        out = np.repeat(np.repeat(box_downsample(img, s), s, axis=0), s, axis=1)
    elif spec.kind == "additive_noise":
        sigma = float(spec.params.get("sigma", 0.1))
        out = img + sigma * rng.standard_normal(img.shape) if sigma > 0 else img.copy()
    else:
        dose = float(spec.params.get("dose", 1.0 / 12.0))
        peak = float(spec.params.get("peak_counts", 1200.0))
        full = rng.poisson(img * peak)
        thinned = rng.binomial(full, dose)
        out = thinned / (dose * peak)
    return np.clip(out, 0.0, 1.0).astype(np.asarray(i_hq).dtype)


# ---------------------------------------------------------------------------
# splits and datasets

def make_splits(seed: int, n_train: int, n_val: int, n_test: int,
                tasks=(0, 1, 2)) -> dict[int, dict[str, np.ndarray]]:
    """Disjoint, deterministic sample-id sets per task and split."""
    if min(n_train, n_val, n_test) < 1:
        raise ContractError("every split needs at least one sample")
    total = n_train + n_val + n_test
    splits = {}
    for t in tasks:
        perm = stream(seed, "splits", t).permutation(total) + t * 1_000_000
        splits[t] = {"train": np.sort(perm[:n_train]),
                     "val": np.sort(perm[n_train:n_train + n_val]),
                     "test": np.sort(perm[n_train + n_val:])}
    return splits


def build_samples(seed: int, ids: np.ndarray, spec: DegradationSpec, size: int) -> list[TaskSample]:
    out = []
    for sid in ids:
        local = int(sid) - spec.task_id * 1_000_000
        (hq,) = generate_hq(seed, 1, size, spec.task_id, start=local)
        lq = degrade(hq, spec, seed * 7919 + int(sid))
        out.append(TaskSample(lq, hq, spec.task_id, int(sid)))
    return out


def build_dataset(seed: int, n_train: int, n_val: int, n_test: int, size: int = 32,
                  specs=DEFAULT_TASKS) -> dict[str, list[TaskSample]]:
    splits = make_splits(seed, n_train, n_val, n_test, [s.task_id for s in specs])
    data: dict[str, list[TaskSample]] = {"train": [], "val": [], "test": []}
    for spec in specs:
        for name in data:
            data[name] += build_samples(seed, splits[spec.task_id][name], spec, size)
    return data


def stack_batch(samples: list[TaskSample], dtype=np.float32):
    lq = np.stack([s.i_lq for s in samples])[:, None].astype(dtype)
    hq = np.stack([s.i_hq for s in samples])[:, None].astype(dtype)
    tasks = np.array([s.task_id for s in samples], dtype=np.int64)
    return lq, hq, tasks


def dump_dataset(samples: list[TaskSample], directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        lq, hq = f"{s.sample_id}_lq.dft", f"{s.sample_id}_hq.dft"
        save_tensor(directory / lq, s.i_lq)
        save_tensor(directory / hq, s.i_hq)
        lines.append(f"{s.sample_id} {s.task_id} {lq} {hq}")
    manifest = directory / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_dataset(directory) -> list[TaskSample]:
    directory = Path(directory)
    out = []
    for line in (directory / "manifest.txt").read_text().splitlines():
        if not line.strip():
            continue
        sid, tid, lq, hq = line.split()
        out.append(TaskSample(load_tensor(directory / lq).data, load_tensor(directory / hq).data, int(tid), int(sid)))
    return out
