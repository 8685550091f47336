"""Confident-sample split and MixMatch fine-tuning on top of RegCE."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .augment import AugPolicy, augment_batch, augment_keyed
from .models import Model, forward
from .noise import NoisyDataset
from .schedules import ScheduleState, ema_model, ema_update
from .tensor import (
    backward,
    mse,
    no_grad,
    one_hot,
    sgd_step,
    softmax,
    softmax_cross_entropy,
    softmax_np,
    take_rows,
)
from .trainer import (
    MetricsLog,
    TrainConfig,
    TrainingError,
    _epoch_record,
    _write_outputs,
    predict_logits,
    run_regce,
    train_epoch,
)

log = logging.getLogger(__name__)

# stream tags keep SSL augmentation keys disjoint from the supervised ones
_SPLIT_STREAM = 1_000_000
_SSL_STREAM = 2_000_000


@dataclass
class MixMatchSpec:
    K: int = 2
    T: float = 0.5
    alpha: float = 0.75
    lambda_u: float = 75.0
    ramp_fraction: float = 1 / 3
    ssl_epochs: int = 200
    # initial lr of the SSL-phase schedule; restarting at the warm-up's 0.1 wrecks a converged model
    learning_rate: float = 0.02
    split_every: int = 1
    split_policy: AugPolicy = field(default_factory=lambda: AugPolicy(kind="weak"))

    def validate(self) -> None:
        if self.T <= 0 or self.K < 1 or self.alpha <= 0:
            raise ValueError("MixMatch needs T > 0, K >= 1 and alpha > 0")
        if self.lambda_u < 0 or not 0 <= self.ramp_fraction <= 1:
            raise ValueError("lambda_u must be >= 0 and ramp_fraction in [0, 1]")
        if self.learning_rate <= 0:
            raise ValueError("MixMatch learning_rate must be > 0")
        if self.ssl_epochs < 0 or self.split_every < 1:
            raise ValueError("ssl_epochs must be >= 0 and split_every >= 1")
        self.split_policy.validate()


@dataclass
class SplitResult:
    labeled_indices: np.ndarray
    unlabeled_indices: np.ndarray
    pred_view1: np.ndarray
    pred_view2: np.ndarray
    precision: float | None

    @property
    def size(self) -> int:
        return len(self.labeled_indices)


def confident_split(model: Model, dataset: NoisyDataset, epoch_seed: int,
                    policy: AugPolicy | None = None) -> SplitResult:
    """Labeled iff both augmented views are classified as the given label."""
    policy = policy or AugPolicy(kind="weak")
    idx = np.arange(len(dataset))
    preds = []
    for view in (0, 1):
        x = augment_batch(dataset.images, idx, _SPLIT_STREAM, epoch_seed, policy, view)
        preds.append(predict_logits(model, x).argmax(axis=1))
    agree = (preds[0] == preds[1]) & (preds[0] == dataset.noisy_labels)
    labeled = np.flatnonzero(agree)
    precision = None
    if dataset.corruption_mask is not None and len(labeled):
        precision = float((~dataset.corruption_mask[labeled]).mean())
    return SplitResult(labeled, np.flatnonzero(~agree), preds[0], preds[1], precision)


def class_balanced_resample(indices, labels, target_size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``target_size`` indices, spread as evenly as possible over the classes present."""
    indices = np.asarray(indices)
    if indices.size == 0:
        raise ValueError("class_balanced_resample: empty index set")
    labels = np.asarray(labels)
    classes = np.unique(labels[indices])
    base, extra = divmod(target_size, len(classes))
    bonus = set(rng.permutation(len(classes))[:extra].tolist())
    picks = []
    for i, c in enumerate(classes):
        members = indices[labels[indices] == c]
        picks.append(rng.choice(members, size=base + (i in bonus), replace=True))
    return rng.permutation(np.concatenate(picks))


def sharpen(p, T: float) -> np.ndarray:
    """q_i = p_i^(1/T) / sum_j p_j^(1/T), row-wise."""
    if T <= 0:
        raise ValueError("temperature must be positive")
    p = np.asarray(p, dtype=np.float64)
    squeeze = p.ndim == 1
    p = np.atleast_2d(p)
    if np.any(p.sum(axis=1) <= 0):
        raise ValueError("sharpen: zero probability row")
    with np.errstate(divide="ignore"):
        logq = np.log(p) / T
    q = np.exp(logq - logq.max(axis=1, keepdims=True))
    q /= q.sum(axis=1, keepdims=True)
    return q[0] if squeeze else q


def batch_stat_logits(model: Model, images: np.ndarray) -> np.ndarray:
    """Logits with batchnorm normalizing by the batch itself; running buffers are left untouched."""
    saved = {k: b.copy() for k, b in model.buffers.items()}
    was_training = model.training
    model.train()
    try:
        with no_grad():
            return forward(model, images.astype(model.dtype, copy=False))[0].data
    finally:
        model.buffers.update(saved)
        model.training = was_training


def guess_labels(model: Model, views: Sequence[np.ndarray], T: float) -> np.ndarray:
    """Average the softmax over the K augmented views, then sharpen.

    Guesses use batch statistics. Running statistics are fitted to mixed-up
    training batches, and eval-mode guesses built on them drift toward one
    class; the consistency loss then locks the model onto that class.
    """
    if not views:
        raise ValueError("guess_labels needs at least one view")
    probs = np.mean([softmax_np(batch_stat_logits(model, v).astype(np.float64)) for v in views], axis=0)
    return sharpen(probs, T)


def mix_lambda(alpha: float, rng: np.random.Generator) -> float:
    lam = rng.beta(alpha, alpha)
    return max(lam, 1 - lam)


def mixmatch_step(model: Model, x_l: np.ndarray, p_l: np.ndarray, u_views: Sequence[np.ndarray],
                  q_u: np.ndarray, spec: MixMatchSpec, rng: np.random.Generator, lam: float | None = None):
    """Mix labeled and guessed-unlabeled examples; return (supervised CE, unsupervised MSE) tensors."""
    if len(x_l) == 0:
        raise ValueError("mixmatch_step needs a nonempty labeled batch")
    xs = np.concatenate([x_l, *u_views]) if len(u_views) else x_l
    ps = np.concatenate([p_l, *([q_u] * len(u_views))]) if len(u_views) else p_l
    lam = mix_lambda(spec.alpha, rng) if lam is None else max(lam, 1 - lam)
    perm = rng.permutation(len(xs))
    mixed_x = (lam * xs + (1 - lam) * xs[perm]).astype(model.dtype, copy=False)
    mixed_p = lam * ps + (1 - lam) * ps[perm]
    logits, _ = forward(model, mixed_x)
    b = len(x_l)
    loss_sup = softmax_cross_entropy(take_rows(logits, 0, b), mixed_p[:b])
    if len(xs) > b:
        loss_unsup = mse(softmax(take_rows(logits, b, len(xs))), mixed_p[b:])
    else:
        loss_unsup = None
    return loss_sup, loss_unsup


def lambda_u_at(spec: MixMatchSpec, t: float) -> float:
    """Linear ramp from 0 to lambda_u over the first ramp_fraction of SSL epochs."""
    ramp = spec.ramp_fraction * spec.ssl_epochs
    if ramp <= 0:
        return spec.lambda_u
    return spec.lambda_u * min(1.0, max(t, 0.0) / ramp)


def _ssl_epoch(model, sgd, ema, config: TrainConfig, spec: MixMatchSpec, train: NoisyDataset,
               split: SplitResult, epoch: int, ssl_epoch: int, lr: float) -> dict:
    model.train()
    sgd.learning_rate = lr
    rng = np.random.default_rng([config.seed, 3, epoch])
    k = train.num_classes
    labeled = class_balanced_resample(split.labeled_indices, train.noisy_labels, len(train), rng)
    unlabeled = rng.permutation(split.unlabeled_indices)
    b = config.batch_size // 2 if config.dual_batch else config.batch_size
    steps = math.ceil(len(labeled) / b)
    totals = {"loss": 0.0, "sup": 0.0, "unsup": 0.0, "correct": 0, "rows": 0}
    for step in range(steps):
        slots = np.arange(step * b, min((step + 1) * b, len(labeled)))
        idx_l = labeled[slots]
        x_l = _keyed_views(train.images, idx_l, slots, epoch, config, config.weak, 0)
        p_l = one_hot(train.noisy_labels[idx_l], k)
        u_views, q_u = [], None
        if len(unlabeled):
            upos = (step * b + np.arange(len(slots))) % len(unlabeled)
            idx_u = unlabeled[upos]
            u_slots = len(labeled) + step * b + np.arange(len(slots))
            u_views = [_keyed_views(train.images, idx_u, u_slots, epoch, config, spec.split_policy, 2 + v)
                       for v in range(spec.K)]
            q_u = guess_labels(model, u_views, spec.T)
        model.train()
        loss_sup, loss_unsup = mixmatch_step(model, x_l, p_l, u_views, q_u, spec, rng)
        weight = lambda_u_at(spec, ssl_epoch + step / steps)
        total = loss_sup if loss_unsup is None else loss_sup + loss_unsup * weight
        if not math.isfinite(float(total.data)):
            raise TrainingError(f"epoch {epoch} step {step}: non-finite SSL loss")
        sgd.zero_grad()
        backward(total)
        sgd_step(sgd)
        if config.ema.every == "step":
            ema_update(model, ema)
        n = len(idx_l)
        totals["loss"] += float(total.data) * n
        totals["sup"] += float(loss_sup.data) * n
        totals["unsup"] += (0.0 if loss_unsup is None else float(loss_unsup.data)) * n
        totals["rows"] += n
    if config.ema.every == "epoch":
        ema_update(model, ema)
    rows = totals["rows"]
    return {
        "loss_all": totals["loss"] / rows,
        "loss_sup": totals["sup"] / rows,
        "loss_unsup": totals["unsup"] / rows,
        "lambda_u": lambda_u_at(spec, ssl_epoch + 1),
    }


def _keyed_views(images, indices, slots, epoch, config, policy, view):
    # keyed by slot so duplicated (resampled) indices still get distinct augmentations
    return augment_keyed(images[indices], slots, config.seed, _SSL_STREAM + epoch, policy, view)


def run_regce_semi(config: TrainConfig, mixmatch: MixMatchSpec, train: NoisyDataset, test: NoisyDataset,
                   out_dir=None, on_epoch: Callable[[dict], None] | None = None):
    """RegCE warm-up for ``config.epochs`` epochs, then MixMatch on confident splits.

    Returns ``(model, ema_state, metrics_log)``.
    """
    mixmatch.validate()
    out = Path(out_dir) if out_dir is not None else None
    model, ema, metrics = run_regce(config, train, test, out_dir=None, on_epoch=on_epoch)
    from .trainer import make_optimizer

    sgd = make_optimizer(model, config)
    sched = ScheduleState(replace(config.schedule, initial_lr=mixmatch.learning_rate,
                                  total_epochs=max(mixmatch.ssl_epochs, 1)))
    split = None
    for s in range(mixmatch.ssl_epochs):
        t0 = time.perf_counter()
        epoch = config.epochs + s
        lr = sched.lr(s)
        if split is None or s % mixmatch.split_every == 0:
            split = confident_split(ema_model(ema, model), train, config.seed * 100003 + epoch,
                                    mixmatch.split_policy)
        if split.size == 0:
            log.warning("epoch %d: confident split is empty; running a supervised-only epoch", epoch)
            stats = train_epoch(model, sgd, ema, config, train, epoch, lr)
            stats.update(loss_sup=stats["loss_all"], loss_unsup=0.0, lambda_u=0.0)
        else:
            stats = _ssl_epoch(model, sgd, ema, config, mixmatch, train, split, epoch, s, lr)
            stats.update(loss_clean=None, loss_noisy=None, acc_train=None)
        record = _epoch_record(epoch, lr, stats, model, ema, test)
        record["plateau"] = sched.end_epoch(s, stats["loss_sup"])
        if record["plateau"]:
            metrics.meta["trigger_epochs"].append(config.epochs + sched.trigger_epoch)
        record.update(
            phase="ssl",
            split_size=split.size,
            split_precision=split.precision,
            loss_sup=stats["loss_sup"],
            loss_unsup=stats["loss_unsup"],
            lambda_u=stats["lambda_u"],
        )
        metrics.append(record, time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(record)
    if metrics.records:
        metrics.meta["final_acc_ema"] = metrics.records[-1]["acc_test_ema"]
        metrics.meta["final_acc_online"] = metrics.records[-1]["acc_test_online"]
    if out is not None:
        _write_outputs(out, metrics, model, ema, config.diagnostics.checkpoints)
    return model, ema, metrics
