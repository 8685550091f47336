"""RegCE supervised training loop and its diagnostics."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .augment import AugPolicy, augment_batch, make_dual_batch
from .models import Model, ModelSpec, build_model, forward
from .noise import NoiseSpec, NoisyDataset
from .schedules import EmaState, LrScheduleSpec, ScheduleState, ema_model, ema_update
from .tensor import SgdState, Tensor, backward, no_grad, sgd_step, softmax_cross_entropy

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class EmaSpec:
    enabled: bool = True
    momentum: float = 0.999
    every: str = "step"

    def validate(self) -> None:
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"EMA momentum must lie in [0, 1), got {self.momentum}")
        if self.every not in ("step", "epoch"):
            raise ValueError(f"EMA frequency must be 'step' or 'epoch', got {self.every!r}")


@dataclass
class OptimizerSpec:
    momentum: float = 0.9
    weight_decay: float = 5e-4


@dataclass
class DiagnosticsSpec:
    sharpness_every: int = 0
    sharpness_epsilon: float = 1e-2
    sharpness_directions: int = 8
    sharpness_samples: int = 512
    grad_cam_every: int = 0
    grad_cam_samples: int = 4
    checkpoints: bool = True


@dataclass
class TrainConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    weak: AugPolicy = field(default_factory=lambda: AugPolicy(kind="weak"))
    strong: AugPolicy = field(default_factory=lambda: AugPolicy(kind="strong"))
    schedule: LrScheduleSpec = field(default_factory=LrScheduleSpec)
    ema: EmaSpec = field(default_factory=EmaSpec)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    batch_size: int = 256
    dual_batch: bool = True
    epochs: int = 200
    seed: int = 0
    precision: str = "float32"
    diagnostics: DiagnosticsSpec = field(default_factory=DiagnosticsSpec)

    def validate(self) -> None:
        self.model.validate()
        self.noise.validate()
        h, w = self.model.input_shape[1:]
        self.weak.validate(h, w)
        self.strong.validate(h, w)
        self.schedule.validate()
        self.ema.validate()
        if self.batch_size < 1 or (self.dual_batch and self.batch_size % 2):
            raise ValueError(f"batch_size must be positive (and even when dual batching), got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    @property
    def toggles(self) -> dict:
        return {
            "lr_on": self.schedule.kind == "sharp",
            "aug_on": not (self.weak.kind == "none" and self.strong.kind == "none"),
            "ema_on": self.ema.enabled,
        }


METRIC_KEYS = (
    "epoch", "lr", "loss_all", "loss_clean", "loss_noisy", "acc_train",
    "acc_test_online", "acc_test_ema", "plateau",
)


class MetricsLog:
    """Per-epoch records; serialized as one JSON object per line."""

    def __init__(self, meta: dict | None = None):
        self.records: list[dict] = []
        self.meta = meta or {}
        self.wall_times: list[float] = []

    def append(self, record: dict, wall_time: float = 0.0) -> None:
        self.records.append(record)
        self.wall_times.append(wall_time)

    def __len__(self):
        return len(self.records)

    def column(self, key: str) -> list:
        return [r.get(key) for r in self.records]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=False) + "\n" for r in self.records)

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path) -> "MetricsLog":
        out = cls()
        for line in Path(path).read_text().splitlines():
            if line.strip():
                out.records.append(json.loads(line))
        return out


# -- evaluation -----------------------------------------------------------------
def predict_logits(model: Model, images: np.ndarray, batch: int = 500) -> np.ndarray:
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            chunks = [forward(model, images[i : i + batch].astype(model.dtype, copy=False))[0].data
                      for i in range(0, len(images), batch)]
    finally:
        model.training = was_training
    return np.concatenate(chunks)


def _per_sample_ce(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return lse - z[np.arange(len(labels)), labels]


def evaluate(model: Model, testset: NoisyDataset, labels: str = "true") -> tuple[float, float]:
    """Accuracy (argmax, ties to the smallest index) and mean cross-entropy."""
    if len(testset) == 0:
        raise ValueError("evaluate: empty test set")
    y = testset.true_labels if labels == "true" else testset.noisy_labels
    logits = predict_logits(model, testset.images)
    acc = float((logits.argmax(axis=1) == y).mean())
    return acc, float(_per_sample_ce(logits, y).mean())


# -- diagnostics ----------------------------------------------------------------
def estimate_sharpness(model, loss_fn: Callable, dataset, epsilon: float, n_directions: int,
                       rng: np.random.Generator) -> float:
    """Random-direction curvature proxy.

    Mean of [L(theta + eps*|theta|*d) - L(theta)] / eps^2 over unit Gaussian
    directions d, each taken with both signs so the first-order term cancels.
    Parameters are restored bit-exactly afterwards.
    """
    if epsilon <= 0 or n_directions < 1:
        raise ValueError("estimate_sharpness needs epsilon > 0 and n_directions >= 1")
    params = model.parameters()
    saved = [p.data.copy() for p in params]
    sizes = [p.data.size for p in params]
    theta = np.concatenate([s.ravel().astype(np.float64) for s in saved])
    radius = epsilon * np.linalg.norm(theta)
    try:
        base = loss_fn(model, dataset)
        total = 0.0
        for _ in range(n_directions):
            d = rng.standard_normal(theta.size)
            d /= np.linalg.norm(d)
            for sign in (1.0, -1.0):
                offset = 0
                for p, s, size in zip(params, saved, sizes):
                    step = d[offset : offset + size].reshape(s.shape)
                    p.data = (s + sign * radius * step).astype(s.dtype)
                    offset += size
                total += (loss_fn(model, dataset) - base) / epsilon**2
    finally:
        for p, s in zip(params, saved):
            p.data = s
    return total / (2 * n_directions)


def grad_cam(model: Model, image: np.ndarray, class_index: int) -> np.ndarray:
    """Class-activation heatmap over the last-stage feature maps, scaled to [0, 1]."""
    k = model.spec.num_classes
    if not 0 <= class_index < k:
        raise ValueError(f"class_index {class_index} outside [0, {k})")
    was_training = model.training
    model.eval()
    saved_grads = {name: p.grad for name, p in model.params.items()}
    try:
        logits, feats = model(Tensor(np.asarray(image, dtype=model.dtype)[None]), capture_features=True)
        if feats is None:
            raise ValueError("model does not expose feature maps")
        feats.retain_grad()
        mask = np.zeros(logits.shape, dtype=logits.dtype)
        mask[0, class_index] = 1
        backward((logits * Tensor(mask)).sum())
        grads = feats.grad[0]
        acts = feats.data[0]
    finally:
        for name, p in model.params.items():
            p.grad = saved_grads[name]
        model.training = was_training
    weights = grads.mean(axis=(1, 2))
    cam = np.maximum((weights[:, None, None] * acts).sum(axis=0), 0).astype(np.float64)
    hi, lo = cam.max(), cam.min()
    if hi <= 0:
        return np.zeros_like(cam)
    if hi == lo:
        return np.ones_like(cam)
    return (cam - lo) / (hi - lo)


# -- training -----------------------------------------------------------------
def make_optimizer(model: Model, config: TrainConfig) -> SgdState:
    return SgdState(model.named_parameters(), config.schedule.initial_lr,
                    config.optimizer.momentum, config.optimizer.weight_decay)


def make_ema(model: Model, config: TrainConfig) -> EmaState:
    # a disabled EMA degenerates to momentum 0: the shadow tracks the online model exactly
    return EmaState.from_model(model, config.ema.momentum if config.ema.enabled else 0.0)


def _ce_loss(model: Model, ds: NoisyDataset) -> float:
    return float(_per_sample_ce(predict_logits(model, ds.images), ds.noisy_labels).mean())


def train_epoch(model: Model, sgd: SgdState, ema: EmaState, config: TrainConfig,
                train: NoisyDataset, epoch: int, lr: float) -> dict:
    """One pass of dual-view cross-entropy training; returns epoch loss statistics."""
    model.train()
    sgd.learning_rate = lr
    n = len(train)
    per_step = config.batch_size // 2 if config.dual_batch else config.batch_size
    order = np.random.default_rng([config.seed, 1, epoch]).permutation(n)
    mask = train.corruption_mask
    sums = {"all": 0.0, "clean": 0.0, "noisy": 0.0}
    counts = {"all": 0, "clean": 0, "noisy": 0}
    correct = 0
    for step, start in enumerate(range(0, n, per_step)):
        idx = order[start : start + per_step]
        if config.dual_batch:
            x, y, _ = make_dual_batch(train.images, train.noisy_labels, idx, epoch, config.seed,
                                      (config.weak, config.strong))
            rows = np.concatenate([idx, idx])
        else:
            x = augment_batch(train.images, idx, epoch, config.seed, config.weak, 0)
            y, rows = train.noisy_labels[idx], idx
        logits, _ = forward(model, x.astype(model.dtype, copy=False))
        try:
            loss = softmax_cross_entropy(logits, y)
        except FloatingPointError as exc:
            raise TrainingError(f"epoch {epoch} step {step}: {exc}") from exc
        if not math.isfinite(float(loss.data)):
            raise TrainingError(f"epoch {epoch} step {step}: non-finite loss {float(loss.data)}")
        sgd.zero_grad()
        backward(loss)
        try:
            sgd_step(sgd)
        except FloatingPointError as exc:
            raise TrainingError(f"epoch {epoch} step {step}: {exc}") from exc
        if config.ema.every == "step":
            ema_update(model, ema)
        per = _per_sample_ce(logits.data, y)
        correct += int((logits.data.argmax(axis=1) == y).sum())
        sums["all"] += per.sum()
        counts["all"] += len(per)
        if mask is not None:
            noisy_rows = mask[rows]
            sums["noisy"] += per[noisy_rows].sum()
            sums["clean"] += per[~noisy_rows].sum()
            counts["noisy"] += int(noisy_rows.sum())
            counts["clean"] += int((~noisy_rows).sum())
    if config.ema.every == "epoch":
        ema_update(model, ema)
    mean = lambda key: sums[key] / counts[key] if counts[key] else None  # noqa: E731
    return {
        "loss_all": mean("all"),
        "loss_clean": mean("clean") if mask is not None else None,
        "loss_noisy": mean("noisy") if mask is not None else None,
        "acc_train": correct / counts["all"],
    }


def run_regce(config: TrainConfig, train: NoisyDataset, test: NoisyDataset, out_dir=None,
              on_epoch: Callable[[dict], None] | None = None):
    """Train with cross-entropy + sharp LR decay + dual augmentation + EMA.

    Returns ``(model, ema_state, metrics_log)``.  The headline number is the
    EMA model's test accuracy (``log.meta["final_acc_ema"]``).
    """
    config.validate()
    out = Path(out_dir) if out_dir is not None else None
    if train.corruption_mask is None:
        log.warning("training set carries no corruption mask; clean/noisy losses omitted")
    model = build_model(config.model, np.random.default_rng([config.seed, 0]), config.dtype)
    sgd = make_optimizer(model, config)
    ema = make_ema(model, config)
    sched = ScheduleState(config.schedule)
    metrics = MetricsLog({"toggles": config.toggles, "trigger_epochs": []})
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = sched.lr(epoch)
        stats = train_epoch(model, sgd, ema, config, train, epoch, lr)
        record = _epoch_record(epoch, lr, stats, model, ema, test)
        record["plateau"] = sched.end_epoch(epoch, stats["loss_all"])
        if record["plateau"]:
            metrics.meta["trigger_epochs"].append(sched.trigger_epoch)
            if out is not None and config.diagnostics.checkpoints:
                _write_checkpoints(out, f"trigger_e{epoch:04d}", model, ema)
        _diagnostics(config, record, epoch, model, ema, train, out)
        metrics.append(record, time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(record)
    if config.epochs:
        metrics.meta["final_acc_ema"] = metrics.records[-1]["acc_test_ema"]
        metrics.meta["final_acc_online"] = metrics.records[-1]["acc_test_online"]
    if out is not None:
        _write_outputs(out, metrics, model, ema, config.diagnostics.checkpoints)
    return model, ema, metrics


def _epoch_record(epoch, lr, stats, model, ema, test) -> dict:
    acc_online, _ = evaluate(model, test)
    acc_ema, _ = evaluate(ema_model(ema, model), test) if ema.num_updates else (acc_online, None)
    return {
        "epoch": epoch,
        "lr": lr,
        "loss_all": stats["loss_all"],
        "loss_clean": stats["loss_clean"],
        "loss_noisy": stats["loss_noisy"],
        "acc_train": stats["acc_train"],
        "acc_test_online": acc_online,
        "acc_test_ema": acc_ema,
        "plateau": False,
    }


def _diagnostics(config, record, epoch, model, ema, train, out) -> None:
    diag = config.diagnostics
    if diag.sharpness_every and (epoch + 1) % diag.sharpness_every == 0:
        subset = train.subset(np.arange(min(diag.sharpness_samples, len(train))))
        record["sharpness"] = estimate_sharpness(
            model, _ce_loss, subset, diag.sharpness_epsilon, diag.sharpness_directions,
            np.random.default_rng([config.seed, 7, epoch]))
    if diag.grad_cam_every and (epoch + 1) % diag.grad_cam_every == 0 and out is not None:
        from . import checkpoint

        snap = ema_model(ema, model)
        maps = {}
        for i in range(min(diag.grad_cam_samples, len(train))):
            maps[f"sample{i}/true"] = grad_cam(snap, train.images[i], int(train.true_labels[i]))
            maps[f"sample{i}/noisy"] = grad_cam(snap, train.images[i], int(train.noisy_labels[i]))
        (out / "gradcam").mkdir(parents=True, exist_ok=True)
        checkpoint.save(out / "gradcam" / f"epoch{epoch:04d}.ckpt", maps)


def _write_checkpoints(out: Path, tag: str, model: Model, ema: EmaState) -> None:
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / f"{tag}_online.ckpt")
    ema.save(out / f"{tag}_ema.ckpt")


def _write_outputs(out: Path, metrics: MetricsLog, model, ema, checkpoints: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    metrics.write(out / "metrics.jsonl")
    (out / "timings.json").write_text(json.dumps([round(t, 4) for t in metrics.wall_times]))
    (out / "summary.json").write_text(json.dumps(metrics.meta, indent=2, sort_keys=True))
    if checkpoints:
        _write_checkpoints(out, "final", model, ema)
