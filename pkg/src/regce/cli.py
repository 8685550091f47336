"""Command-line front end: ``regce {train,train-semi,matrix,export,inspect-dataset}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import harness
from .data import load_dataset, save_dataset
from .noise import noise_stats


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=d(None), help="experiment config (JSON)")
    parser.add_argument("--seed", type=int, default=d(None), help="override train and noise seed")
    parser.add_argument("--out", default=d("runs"), help="output directory")
    parser.add_argument("--threads", type=int, default=d(1), help="BLAS threads / matrix workers")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="regce", description=__doc__)
    _global_flags(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    sub.add_parser("train", parents=[common], help="RegCE training run")
    sub.add_parser("train-semi", parents=[common], help="RegCE warm-up followed by MixMatch")
    sub.add_parser("matrix", parents=[common], help="run the configured experiment matrix")

    exp = sub.add_parser("export", parents=[common], help="export tidy CSV series for a figure")
    exp.add_argument("--figure", required=True, choices=sorted(harness.FIGURES))
    exp.add_argument("--csv", help="output CSV path (default: stdout)")
    exp.add_argument("runs", nargs="+", help="run directories")

    insp = sub.add_parser("inspect-dataset", parents=[common], help="summarize a dataset container")
    insp.add_argument("path", nargs="?", help="dataset container; omit to use the config's dataset")
    insp.add_argument("--save", help="write the (noisy) training set as a container")
    return parser


def _load_config(args) -> cfgmod.ExperimentConfig:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.ExperimentConfig()
    if args.seed is not None:
        cfg.train.seed = args.seed
        cfg.train.noise.seed = args.seed
    cfg.validate()
    return cfg


def _print_epoch(record: dict) -> None:
    fmt = lambda v: "-" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v))  # noqa: E731
    keys = ("epoch", "lr", "loss_all", "loss_clean", "loss_noisy", "acc_test_online", "acc_test_ema")
    print(" ".join(f"{k}={fmt(record.get(k))}" for k in keys), flush=True)


def _describe(ds) -> dict:
    stats = noise_stats(ds)
    return {
        "n": len(ds),
        "shape": list(ds.images.shape[1:]),
        "num_classes": ds.num_classes,
        "class_counts": np.bincount(ds.true_labels, minlength=ds.num_classes).tolist(),
        "has_mask": ds.corruption_mask is not None,
        "noise_rate": stats["rate"],
        "corrupted": stats["corrupted"],
    }


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (cfgmod.ConfigError, harness.MissingColumnError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    from threadpoolctl import threadpool_limits

    if args.command in ("train", "train-semi"):
        cfg = _load_config(args)
        with threadpool_limits(args.threads):
            metrics = harness.run_single(cfg, args.out, semi=args.command == "train-semi", on_epoch=_print_epoch)
        print(json.dumps({"final_acc_ema": metrics.meta.get("final_acc_ema"), "out": str(args.out)}))
        return 0
    if args.command == "matrix":
        cfg = _load_config(args)
        rows = harness.run_experiment_matrix(cfg, args.out, args.threads)
        for row in rows:
            print(f"{row['run_id']}: acc {row['acc_mean']:.4f} ± {row['acc_std']:.4f} (n={row['seed_count']})")
        print(f"summary written to {Path(args.out) / 'summary.csv'}")
        return 0
    if args.command == "export":
        rows = harness.export_figure_data(args.runs, args.figure, args.csv)
        if args.csv is None:
            harness.write_figure_csv(sys.stdout, rows, harness.FIGURES[args.figure])
        return 0
    if args.command == "inspect-dataset":
        if args.path:
            train = load_dataset(args.path)
            print(json.dumps(_describe(train), indent=2))
            return 0
        cfg = _load_config(args)
        train, test = harness.prepare_data(cfg)
        print(json.dumps({"train": _describe(train), "test": _describe(test)}, indent=2))
        if args.save:
            save_dataset(args.save, train)
        return 0
    raise AssertionError(args.command)


if __name__ == "__main__":
    sys.exit(main())
