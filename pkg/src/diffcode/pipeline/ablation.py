"""Component ablation: plain backbone, +routing, +codebook references,
+latent diffusion retrieval, and bank versus single codebook.

Every variant of one seed sees the same data, the same batch order and the
same shared-layer initialisation; only the component under study changes.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .stages import (
    evaluate_prediction,
    infer,
    load_data,
    references_for,
    routing_consistency,
    train_stage1,
    train_stage2,
    train_stage3,
)

log = logging.getLogger(__name__)

# name -> (routing enabled, reference mode, shared codebook)
VARIANTS: dict[str, tuple[bool, str, bool]] = {
    "V1": (False, "none", False),
    "V2": (True, "none", False),
    "V3": (True, "direct", False),
    "DiffCode": (True, "diffusion", False),
    "single-codebook": (True, "diffusion", True),
}
ORDER = ("V1", "V2", "V3", "DiffCode")


@dataclass
class AblationReport:
    seeds: list[int]
    psnr: dict[int, dict[str, dict]] = field(default_factory=dict)   # seed -> variant -> per-task + "avg"
    routing: dict[int, dict[str, float]] = field(default_factory=dict)  # seed -> variant -> consistency
    seconds: float = 0.0

    def average(self, seed: int, variant: str) -> float:
        return self.psnr[seed][variant]["avg"]

    def ordering_holds(self, seed: int, min_gain: float = 0.3) -> bool:
        a = [self.average(seed, v) for v in ORDER]
        return all(x <= y for x, y in zip(a, a[1:])) and a[-1] - a[0] >= min_gain

    def bank_beats_single(self, seed: int, margin: float = 0.05) -> bool:
        return self.average(seed, "DiffCode") - self.average(seed, "single-codebook") >= margin

    def majority(self, check) -> bool:
        return sum(bool(check(s)) for s in self.seeds) * 2 > len(self.seeds)

    def to_tsv(self) -> str:
        tasks = sorted(k for k in next(iter(next(iter(self.psnr.values())).values())) if k != "avg")
        lines = ["seed\tvariant\t" + "\t".join(f"task{t}" for t in tasks) + "\taverage"]
        for seed in self.seeds:
            for v, row in self.psnr[seed].items():
                lines.append(f"{seed}\t{v}\t" + "\t".join(f"{row[t]:.4f}" for t in tasks) + f"\t{row['avg']:.4f}")
        for v in VARIANTS:
            mean = np.mean([self.average(s, v) for s in self.seeds])
            lines.append(f"mean\t{v}\t" + "\t".join("" for _ in tasks) + f"\t{mean:.4f}")
        return "\n".join(lines)


def variant_config(config: RunConfig, name: str) -> RunConfig:
    routing, reference, shared = VARIANTS[name]
    return config.replace(reference=reference, **{"routing.enabled": routing, "codebook.shared": shared})


def run_seed(config: RunConfig, variants=tuple(VARIANTS)) -> tuple[dict[str, dict], dict[str, float]]:
    data = load_data(config)
    test = data["test"]
    priors = {}
    for shared in sorted({VARIANTS[v][2] for v in variants if VARIANTS[v][1] != "none"}):
        c = config.replace(**{"codebook.shared": shared})
        s1 = train_stage1(c, data)
        s2 = train_stage2(c, s1, data) if any(VARIANTS[v][1] == "diffusion" and VARIANTS[v][2] == shared
                                              for v in variants) else None
        priors[shared] = (s1, s2)
    out, routing = {}, {}
    for name in variants:
        c = variant_config(config, name)
        s1, s2 = priors.get(c.codebook.shared, (None, None))
        refs = None
        if c.reference != "none":
            refs = references_for(data["train"], c.reference, s1, s2, c)
        s3 = train_stage3(c, s1, s2, data, references=refs)
        pred = infer(c, s1, s2, s3, test)
        report = evaluate_prediction(pred, test, c.peak)
        routing[name] = routing_consistency(pred, test)
        row = {t: m["psnr"] for t, m in report.per_task.items()}
        row["avg"] = report.average["psnr"]
        out[name] = row
        log.info("seed %d %s avg PSNR %.4f routing %.3f", config.seed, name, row["avg"], routing[name])
    return out, routing


def run_ablation(config: RunConfig, seeds=(0, 1, 2), variants=tuple(VARIANTS)) -> AblationReport:
    """Train and evaluate every variant for each seed; returns PSNR per seed, variant and task."""
    start = time.perf_counter()
    report = AblationReport(list(seeds))
    for seed in seeds:
        report.psnr[seed], report.routing[seed] = run_seed(config.replace(seed=seed), variants)
    report.seconds = time.perf_counter() - start
    return report
