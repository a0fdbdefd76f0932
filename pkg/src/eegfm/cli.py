"""Command-line entry points.

Subcommands: pretrain, finetune, evaluate, gradcheck, mask-demo, synth,
ablate.  Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as dataio
from . import masking, training
from .config import ConfigError, load_run_config
from .numerics import NumericalError, seeded_stream


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="flat key=value config file")
    parser.add_argument("--seed", type=int, default=None, help="overrides run.seed")
    parser.add_argument("--out", default=None, help="overrides run.out_dir")
    parser.add_argument("--resume", default=None, help="checkpoint to resume/start from")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eegfm", description=__doc__)
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode in ("pretrain", "finetune", "evaluate", "gradcheck", "synth"):
        _add_common(sub.add_parser(mode))
    demo = sub.add_parser("mask-demo")
    _add_common(demo)
    demo.add_argument("--rows", type=int, default=32, help="time steps T")
    demo.add_argument("--channels", type=int, default=8, help="channels D")
    demo.add_argument("--ratio", type=float, default=0.35)
    demo.add_argument("--strategy", choices=("aamp", "random"), default="aamp")
    ablate = sub.add_parser("ablate")
    _add_common(ablate)
    ablate.add_argument(
        "--axis", required=True, help=f"one of {sorted(training.ABLATION_AXES)}"
    )
    return parser


def _config(args) -> "training.RunConfig":
    overrides = {}
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    if args.out is not None:
        overrides["run.out_dir"] = args.out
    return load_run_config(args.config, overrides)


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    summary = training.run_pretrain(cfg, resume=args.resume)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_finetune(args) -> int:
    cfg = _config(args)
    outcome = training.run_finetune(cfg, checkpoint=args.resume)
    print(json.dumps(outcome["summary"], indent=2, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    if not args.resume:
        raise ConfigError("evaluate needs --resume pointing at a fine-tuned checkpoint")
    result = training.run_evaluate(cfg, args.resume)
    print(result.to_json())
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    reports = training.gradient_suite(seed=cfg.seed)
    failed = False
    for report in reports:
        print(report)
        failed |= not report.passed
    if failed:
        raise NumericalError("gradient checks failed")
    return 0


def cmd_mask_demo(args) -> int:
    cfg = _config(args)
    rng = seeded_stream(cfg.seed).split("mask-demo")
    x = np.asarray(rng.normal(size=(args.rows, args.channels)))
    fn = masking.aamp_mask if args.strategy == "aamp" else masking.random_mask
    spec = fn(x, args.ratio, rng)
    grid = "\n".join(
        "".join("#" if spec.mask[t, d] else "." for d in range(args.channels))
        for t in range(args.rows)
    )
    summary = {
        "strategy": args.strategy,
        "ratio": spec.ratio,
        "per_channel_percentile": [
            None if np.isnan(v) else round(float(v), 6) for v in spec.per_channel_percentile
        ],
        "rank_windows": spec.rank_windows.tolist() if spec.rank_windows is not None else None,
        "masked_per_channel": spec.n_masked_per_channel.tolist(),
    }
    print(grid)
    print(json.dumps(summary, indent=2, sort_keys=True))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "mask.txt").write_text(grid + "\n")
        (out / "mask.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_synth(args) -> int:
    cfg = _config(args)
    layout, _ = training.resolve_layout(cfg)
    samples = training.build_synth_samples(
        layout,
        cfg.synth_segments,
        cfg.synth_seed,
        n_classes=cfg.synth_classes,
        data_length=cfg.data_length,
    )
    n = len(samples)
    splits = {
        "train": list(range(0, int(0.7 * n))),
        "val": list(range(int(0.7 * n), int(0.85 * n))),
        "test": list(range(int(0.85 * n), n)),
    }
    out = cfg.out_dir
    dataio.save_dataset(out, samples, splits)
    print(json.dumps({"dataset": str(out), "n_samples": n, "splits": {k: len(v) for k, v in splits.items()}}))
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    rows = training.run_ablation(cfg, args.axis)
    for row in rows:
        print(
            f"{row['variant']}: probe_balanced_accuracy={row['probe_balanced_accuracy']:.4f} "
            f"final_reconstruction={row['final_reconstruction']:.6g}"
        )
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "mask-demo": cmd_mask_demo,
    "synth": cmd_synth,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.mode](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
