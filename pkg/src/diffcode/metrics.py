"""PSNR, SSIM and RMSE."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError

PSNR_IDENTICAL = math.inf


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def rmse(a, b) -> float:
    a, b = _pair(a, b)
    return math.sqrt(float(np.mean((a - b) ** 2)))


def psnr(a, b, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)``; identical images return ``inf``."""
    if peak <= 0:
        raise ContractError(f"peak must be positive, got {peak}")
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = sum(g[i] * img[i:img.shape[0] - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[:, j:rows.shape[1] - k + 1 + j] for j in range(k))


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         peak: float = 1.0) -> float:
    """Mean local SSIM of two 2-D images over a Gaussian window (valid positions only)."""
    a, b = _pair(a, b)
    a, b = np.squeeze(a), np.squeeze(b)
    if a.ndim != 2:
        raise DimensionError(f"ssim expects 2-D images, got {a.shape}")
    if min(a.shape) < window:
        raise ContractError(f"image {a.shape} smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    """Per-task means plus the average over tasks."""

    per_task: dict[int, dict[str, float]] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)

    @property
    def average(self) -> dict[str, float]:
        keys = ("psnr", "ssim", "rmse")
        if not self.per_task:
            return {k: math.nan for k in keys}
        return {k: float(np.mean([v[k] for v in self.per_task.values()])) for k in keys}

    def to_tsv(self, names: dict[int, str] | None = None) -> str:
        names = names or {}
        lines = ["task\tPSNR\tSSIM\tRMSE"]
        for t in sorted(self.per_task):
            m = self.per_task[t]
            lines.append(f"{names.get(t, t)}\t{m['psnr']:.4f}\t{m['ssim']:.4f}\t{m['rmse']:.6f}")
        avg = self.average
        lines.append(f"average\t{avg['psnr']:.4f}\t{avg['ssim']:.4f}\t{avg['rmse']:.6f}")
        return "\n".join(lines)


def evaluate(preds, targets, task_ids, peak: float = 1.0) -> MetricReport:
    """Aggregate metrics per task; infinite PSNRs are left out of the mean with a warning."""
    buckets: dict[int, dict[str, list[float]]] = {}
    for p, t, tid in zip(preds, targets, task_ids):
        b = buckets.setdefault(int(tid), {"psnr": [], "ssim": [], "rmse": []})
        value = psnr(p, t, peak)
        if math.isinf(value):
            warnings.warn("identical prediction and target; PSNR excluded from the average", RuntimeWarning)
        else:
            b["psnr"].append(value)
        b["ssim"].append(ssim(p, t, peak=peak))
        b["rmse"].append(rmse(p, t))
    report = MetricReport()
    for tid, b in sorted(buckets.items()):
        report.per_task[tid] = {k: float(np.mean(v)) if v else math.inf for k, v in b.items()}
        report.counts[tid] = len(b["rmse"])
    return report
