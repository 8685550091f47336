"""Experiment plumbing: data preparation, single runs, matrices and figure-data export."""
from __future__ import annotations

import copy
import csv
import itertools
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .augment import AugPolicy
from .config import ExperimentConfig
from .data import generate_synthetic_dataset, load_cifar_binary, load_dataset
from .noise import NoiseSpec, NoisyDataset, inject
from .semi import run_regce_semi
from .trainer import MetricsLog, run_regce

log = logging.getLogger(__name__)

SUMMARY_HEADER = ["run_id", "noise_kind", "noise_rate", "lr_on", "aug_on", "ema_on", "semi_on",
                  "seed_count", "acc_mean", "acc_std"]

# (lr, aug, ema): all off, each alone, each pair, all on
ABLATION_GRID = [
    (False, False, False), (True, False, False), (False, True, False), (False, False, True),
    (True, True, False), (True, False, True), (False, True, True), (True, True, True),
]

FIGURES = {
    "schedules": ["lr"],
    "memorization": ["loss_clean", "loss_noisy"],
    "sharpness": ["sharpness"],
    "generalization": ["acc_test_online", "acc_test_ema"],
    "augment_compare": ["acc_test_ema"],
}


def load_data(cfg: ExperimentConfig) -> tuple[NoisyDataset, NoisyDataset]:
    ds = cfg.dataset
    if ds.kind == "synthetic":
        return generate_synthetic_dataset(ds.synthetic)
    if ds.kind == "container":
        return load_dataset(ds.train_path[0]), load_dataset(ds.test_path[0])
    return load_cifar_binary(ds.train_path, ds.kind), load_cifar_binary(ds.test_path, ds.kind)


def prepare_data(cfg: ExperimentConfig) -> tuple[NoisyDataset, NoisyDataset]:
    """Load the clean data and corrupt the training labels per ``cfg.train.noise``."""
    train, test = load_data(cfg)
    if train.corruption_mask is not None and train.corruption_mask.any():
        # container already carries injected noise
        return train, test
    return inject(train, cfg.train.noise), test


def run_single(cfg: ExperimentConfig, out_dir, semi: bool = False, on_epoch=None) -> MetricsLog:
    """Train one configuration and write config, metrics and checkpoints to ``out_dir``."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfgmod.dumps(cfg))
    train, test = prepare_data(cfg)
    if semi:
        _, _, metrics = run_regce_semi(cfg.train, cfg.mixmatch, train, test, out, on_epoch)
    else:
        _, _, metrics = run_regce(cfg.train, train, test, out, on_epoch)
    return metrics


def apply_toggles(cfg: ExperimentConfig, lr_on: bool, aug_on: bool, ema_on: bool) -> ExperimentConfig:
    """Switch the three regularizers.

    "Off" means a gradual cosine decay over the whole run instead of the sharp
    drop, both views un-augmented, and no weight averaging.
    """
    cfg = copy.deepcopy(cfg)
    t = cfg.train
    if lr_on:
        t.schedule = replace(t.schedule, kind="sharp")
    else:
        t.schedule = replace(t.schedule, kind="cosine", total_epochs=t.epochs)
    if not aug_on:
        t.weak, t.strong = AugPolicy(kind="none"), AugPolicy(kind="none")
    t.ema = replace(t.ema, enabled=ema_on)
    return cfg


def cell_name(kind: str, rate: float, toggles: dict, semi: bool) -> str:
    return (f"{kind}-r{rate:.2f}-lr{int(toggles['lr_on'])}-aug{int(toggles['aug_on'])}"
            f"-ema{int(toggles['ema_on'])}-semi{int(semi)}")


def expand_matrix(cfg: ExperimentConfig) -> list[tuple[str, str, ExperimentConfig, bool]]:
    """Every (cell_id, run_name, resolved config, semi flag) in deterministic order."""
    m = cfg.matrix
    kinds = m.noise_kinds or [cfg.train.noise.kind]
    rates = m.noise_rates if m.noise_rates is not None else [cfg.train.noise.rate]
    grid = ABLATION_GRID if m.ablation else [None]
    runs = []
    for kind, rate, toggles, semi in itertools.product(kinds, rates, grid, m.semi):
        base = copy.deepcopy(cfg)
        if toggles is not None:
            base = apply_toggles(base, *toggles)
        cell = cell_name(kind, rate, base.train.toggles, semi)
        for seed in m.seeds:
            run = copy.deepcopy(base)
            run.train.noise = NoiseSpec(kind, float(rate), int(seed))
            run.train.seed = int(seed)
            runs.append((cell, f"{cell}-seed{seed}", run, bool(semi)))
    return runs


def _run_job(job):
    cell, name, cfg, semi, out_root, threads = job
    from threadpoolctl import threadpool_limits

    out = Path(out_root) / name
    try:
        with threadpool_limits(threads):
            metrics = run_single(cfg, out, semi)
        return name, metrics.meta.get("final_acc_ema"), None
    except Exception:  # a failed run is recorded, the matrix carries on
        err = traceback.format_exc()
        out.mkdir(parents=True, exist_ok=True)
        (out / "error.txt").write_text(err)
        return name, None, err


def run_experiment_matrix(cfg: ExperimentConfig, out_root, parallelism: int = 1) -> list[dict]:
    """Run every matrix cell × seed, then write ``summary.csv`` with per-cell mean/std."""
    cfg.validate()
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    (out_root / "matrix_config.json").write_text(cfgmod.dumps(cfg))
    runs = expand_matrix(cfg)
    jobs = [(cell, name, run, semi, str(out_root), 1 if parallelism > 1 else None)
            for cell, name, run, semi in runs]
    if parallelism > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(job) for job in jobs]
    accs = {name: acc for name, acc, _ in results}
    failures = [(name, err) for name, _, err in results if err]
    for name, err in failures:
        log.error("run %s failed:\n%s", name, err)
    rows = summarize(runs, accs)
    write_summary(out_root / "summary.csv", rows)
    return rows


def summarize(runs, accs: dict) -> list[dict]:
    cells: dict[str, list] = {}
    meta: dict[str, tuple] = {}
    for cell, name, run, semi in runs:
        cells.setdefault(cell, [])
        meta[cell] = (run, semi)
        if accs.get(name) is not None:
            cells[cell].append(accs[name])
    rows = []
    for cell, values in cells.items():
        run, semi = meta[cell]
        tog = run.train.toggles
        arr = np.asarray(values, dtype=np.float64)
        rows.append({
            "run_id": cell,
            "noise_kind": run.train.noise.kind,
            "noise_rate": run.train.noise.rate,
            "lr_on": int(tog["lr_on"]),
            "aug_on": int(tog["aug_on"]),
            "ema_on": int(tog["ema_on"]),
            "semi_on": int(semi),
            "seed_count": len(values),
            "acc_mean": float(arr.mean()) if len(arr) else float("nan"),
            "acc_std": float(arr.std(ddof=1)) if len(arr) > 1 else 0.0,
        })
    return rows


def write_summary(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_HEADER, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, "acc_mean": f"{row['acc_mean']:.6f}", "acc_std": f"{row['acc_std']:.6f}",
                             "noise_rate": f"{row['noise_rate']:.4f}"})


def read_summary(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class MissingColumnError(KeyError):
    pass


def export_figure_data(run_dirs, figure: str, out_path=None) -> list[dict]:
    """Tidy rows (series, epoch, value columns...) for one figure; optionally written as CSV."""
    if figure not in FIGURES:
        raise ValueError(f"unknown figure {figure!r}; expected one of {sorted(FIGURES)}")
    columns = FIGURES[figure]
    rows = []
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        metrics = MetricsLog.read(run_dir / "metrics.jsonl")
        for col in columns:
            if not any(r.get(col) is not None for r in metrics.records):
                raise MissingColumnError(f"{run_dir.name}: metrics lack column {col!r} needed for {figure!r}")
        for rec in metrics.records:
            rows.append({"series": run_dir.name, "epoch": rec["epoch"], **{c: rec.get(c) for c in columns}})
    if out_path is not None:
        with open(out_path, "w", newline="") as fh:
            write_figure_csv(fh, rows, columns)
    return rows


def write_figure_csv(fh, rows: list[dict], columns: list[str]) -> None:
    writer = csv.DictWriter(fh, fieldnames=["series", "epoch", *columns], lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if v is None else v) for k, v in row.items()})


def read_run_summary(run_dir) -> dict:
    return json.loads((Path(run_dir) / "summary.json").read_text())
