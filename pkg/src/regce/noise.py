"""Synthetic label-noise injection with exact accounting."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

# CIFAR-10 index order: airplane, automobile, bird, cat, deer, dog, frog, horse, ship, truck
CIFAR10_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck",
)
CIFAR10_ASYM_MAP = {9: 1, 2: 0, 4: 7, 3: 5, 5: 3}

NOISE_KINDS = ("symmetric", "asymmetric_cifar10", "asymmetric_next_class")


@dataclass
class NoiseSpec:
    kind: str = "symmetric"
    rate: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; expected one of {NOISE_KINDS}")
        _check_rate(self.rate)


@dataclass
class NoisyDataset:
    """Images with true labels, observed (possibly corrupted) labels and the corruption mask."""

    images: np.ndarray
    true_labels: np.ndarray
    noisy_labels: np.ndarray
    num_classes: int
    corruption_mask: np.ndarray | None = None
    class_names: list | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.true_labels = np.asarray(self.true_labels, dtype=np.int64)
        self.noisy_labels = np.asarray(self.noisy_labels, dtype=np.int64)
        if self.corruption_mask is not None:
            self.corruption_mask = np.asarray(self.corruption_mask, dtype=bool)

    def __len__(self) -> int:
        return len(self.true_labels)

    @classmethod
    def clean(cls, images, labels, num_classes: int, class_names=None) -> "NoisyDataset":
        labels = np.asarray(labels, dtype=np.int64)
        return cls(images, labels, labels.copy(), num_classes, np.zeros(len(labels), bool), class_names)

    def subset(self, indices) -> "NoisyDataset":
        idx = np.asarray(indices)
        mask = None if self.corruption_mask is None else self.corruption_mask[idx]
        return replace(
            self,
            images=self.images[idx],
            true_labels=self.true_labels[idx],
            noisy_labels=self.noisy_labels[idx],
            corruption_mask=mask,
        )


def _check_rate(rate: float) -> None:
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"noise rate must lie in [0, 1], got {rate}")


def _select(n: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    count = int(np.floor(rate * n + 1e-9))
    return np.sort(rng.permutation(n)[:count])


def _with_labels(ds: NoisyDataset, noisy: np.ndarray, kind: str, rate: float) -> NoisyDataset:
    return replace(
        ds,
        noisy_labels=noisy,
        corruption_mask=noisy != ds.true_labels,
        meta={**ds.meta, "noise_kind": kind, "noise_rate": rate, "symmetric_convention": "different_class"},
    )


def inject_symmetric(ds: NoisyDataset, spec: NoiseSpec) -> NoisyDataset:
    """Flip exactly floor(rate*N) labels, each to a uniformly drawn *different* class."""
    if spec.kind != "symmetric":
        raise ValueError(f"inject_symmetric called with kind {spec.kind!r}")
    _check_rate(spec.rate)
    rng = np.random.default_rng(spec.seed)
    idx = _select(len(ds), spec.rate, rng)
    noisy = ds.true_labels.copy()
    # offset in 1..K-1 keeps the new class distinct and uniform over the others
    offset = rng.integers(1, ds.num_classes, size=len(idx))
    noisy[idx] = (ds.true_labels[idx] + offset) % ds.num_classes
    return _with_labels(ds, noisy, "symmetric", spec.rate)


def inject_asymmetric_cifar10(ds: NoisyDataset, rate: float, seed: int = 0) -> NoisyDataset:
    """truck->automobile, bird->airplane, deer->horse, cat<->dog on a selected fraction."""
    if ds.num_classes != 10:
        raise ValueError(f"CIFAR-10 asymmetric noise needs 10 classes, dataset has {ds.num_classes}")
    _check_rate(rate)
    rng = np.random.default_rng(seed)
    idx = _select(len(ds), rate, rng)
    noisy = ds.true_labels.copy()
    lut = np.arange(10)
    for src, dst in CIFAR10_ASYM_MAP.items():
        lut[src] = dst
    noisy[idx] = lut[ds.true_labels[idx]]
    return _with_labels(ds, noisy, "asymmetric_cifar10", rate)


def inject_asymmetric_next_class(ds: NoisyDataset, rate: float, seed: int = 0) -> NoisyDataset:
    if ds.num_classes < 2:
        raise ValueError("next-class noise needs at least 2 classes")
    _check_rate(rate)
    rng = np.random.default_rng(seed)
    idx = _select(len(ds), rate, rng)
    noisy = ds.true_labels.copy()
    noisy[idx] = (ds.true_labels[idx] + 1) % ds.num_classes
    return _with_labels(ds, noisy, "asymmetric_next_class", rate)


def inject(ds: NoisyDataset, spec: NoiseSpec) -> NoisyDataset:
    spec.validate()
    if spec.kind == "symmetric":
        return inject_symmetric(ds, spec)
    if spec.kind == "asymmetric_cifar10":
        return inject_asymmetric_cifar10(ds, spec.rate, spec.seed)
    return inject_asymmetric_next_class(ds, spec.rate, spec.seed)


def noise_stats(ds: NoisyDataset) -> dict:
    """Realized corruption rate and the true×observed confusion counts."""
    k = ds.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (ds.true_labels, ds.noisy_labels), 1)
    n = len(ds)
    corrupted = int((ds.noisy_labels != ds.true_labels).sum())
    return {
        "n": n,
        "corrupted": corrupted,
        "rate": corrupted / n if n else 0.0,
        "confusion": confusion,
    }
