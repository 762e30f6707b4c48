"""Command-line entry point: ``diffcode <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .diffusion import make_schedule
from .errors import DiffCodeError
from .numerics.io import save_tensor
from .pipeline import load_config
from .pipeline.config import RunConfig
from .pipeline.stages import (
    evaluate_prediction,
    infer,
    load_data,
    load_stage1,
    load_stage2,
    load_stage3,
    routing_audit,
    train_stage1,
    train_stage2,
    train_stage3,
)
from .tasks import DEFAULT_TASKS, dump_dataset

log = logging.getLogger("diffcode")
TASK_NAMES = {s.task_id: s.kind for s in DEFAULT_TASKS}


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise DiffCodeError(f"missing {what} checkpoint {path}; run the earlier stage first")
    return path


def _load_chain(config: RunConfig, upto: int):
    """Load the checkpoints of stages ``1..upto`` from ``config.out_dir``."""
    out = Path(config.out_dir)
    s1 = s2 = s3 = None
    if upto >= 1:
        s1 = load_stage1(_require(out / "stage1.ckpt", "stage-1"), config)
    if upto >= 2 and config.reference == "diffusion":
        s2 = load_stage2(_require(out / "stage2.ckpt", "stage-2"), config, s1)
    if upto >= 3:
        s3 = load_stage3(_require(out / "stage3.ckpt", "stage-3"), config, s1, s2)
    return s1, s2, s3


def cmd_synth_data(args, config: RunConfig) -> int:
    out = Path(args.out or config.data_dir or Path(config.out_dir) / "data")
    data = load_data(config.replace(data_dir=None))
    for split, samples in data.items():
        dump_dataset(samples, out / split)
        print(f"{split}\t{len(samples)}\t{out / split}")
    return 0


def cmd_train(args, config: RunConfig) -> int:
    config = config.replace(stage=args.stage)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = load_data(config)
    if args.stage == 1:
        s = train_stage1(config, data, out)
    elif args.stage == 2:
        s1, _, _ = _load_chain(config, 1)
        s = train_stage2(config, s1, data, out)
    else:
        s1, s2, _ = _load_chain(config, 2)
        s = train_stage3(config, s1, s2, data, out)
    print(f"stage {args.stage}\tfinal_loss {s.history[-1]:.6f}\tcheckpoint {s.ckpt_hash}")
    return 0


def _predict(args, config: RunConfig):
    samples = load_data(config)[args.split]
    s1, s2, s3 = _load_chain(config, 3)
    return samples, infer(config, s1, s2, s3, samples)


def cmd_infer(args, config: RunConfig) -> int:
    samples, pred = _predict(args, config)
    out = Path(args.out or Path(config.out_dir) / f"restored_{args.split}")
    out.mkdir(parents=True, exist_ok=True)
    for sid, img in zip(pred.sample_ids, pred.restored):
        save_tensor(out / f"{sid}_restored.dft", img[0])
    print(f"wrote {len(pred.sample_ids)} images to {out}")
    if args.audit:
        Path(args.audit).write_text(routing_audit(pred, samples) + "\n")
    return 0


def cmd_eval(args, config: RunConfig) -> int:
    samples, pred = _predict(args, config)
    peak = config.peak if args.peak is None else args.peak
    print(evaluate_prediction(pred, samples, peak).to_tsv(TASK_NAMES))
    if args.audit:
        Path(args.audit).write_text(routing_audit(pred, samples) + "\n")
    return 0


def cmd_ablate(args, config: RunConfig) -> int:
    from .pipeline.ablation import run_ablation

    report = run_ablation(config, seeds=tuple(args.seeds))
    print(report.to_tsv())
    return 0


def cmd_inspect_schedule(args, config: RunConfig) -> int:
    d = config.diffusion
    print(make_schedule(d.T, d.beta_start, d.beta_end).dump())
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="diffcode", description="Codebook-prior all-in-one image restoration.")
    ap.add_argument("--config", default=None, help="JSON run configuration (defaults apply when omitted)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate and write the synthetic task splits")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train one stage")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("infer", cmd_infer, "restore a split and write the images"),
                                 ("eval", cmd_eval, "per-task PSNR/SSIM/RMSE table")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--split", default="test", choices=("train", "val", "test"))
        p.add_argument("--audit", default=None, help="write the routing audit log here")
        if name == "infer":
            p.add_argument("--out", default=None)
        else:
            p.add_argument("--peak", type=float, default=None, help="PSNR peak value (overrides the config)")
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="run the component ablation")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect-schedule", help="print the noise schedule")
    p.set_defaults(func=cmd_inspect_schedule)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        config = load_config(args.config)
        return args.func(args, config)
    except (DiffCodeError, OSError, ValueError, KeyError) as exc:
        print(f"diffcode: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
