"""Dataset ingestion: harness container format, CIFAR binaries, synthetic shapes."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .noise import CIFAR10_CLASSES, NoisyDataset

MAGIC = b"RGCEDSET"
VERSION = 1
FLAG_NOISY = 1
FLAG_NAMES = 2
_HEADER = struct.Struct("<8sIIIIIII")


class DatasetFormatError(ValueError):
    pass


# -- harness container -----------------------------------------------------------
def dumps_dataset(ds: NoisyDataset) -> bytes:
    n, c, h, w = ds.images.shape
    flags = (FLAG_NOISY if ds.corruption_mask is not None else 0) | (FLAG_NAMES if ds.class_names else 0)
    parts = [
        _HEADER.pack(MAGIC, VERSION, n, c, h, w, ds.num_classes, flags),
        np.ascontiguousarray(ds.images, dtype="<f4").tobytes(),
        ds.true_labels.astype("<i4").tobytes(),
    ]
    if flags & FLAG_NOISY:
        parts.append(ds.noisy_labels.astype("<i4").tobytes())
        parts.append(ds.corruption_mask.astype(np.uint8).tobytes())
    if flags & FLAG_NAMES:
        names = json.dumps(list(ds.class_names)).encode("utf-8")
        parts.append(struct.pack("<I", len(names)) + names)
    return b"".join(parts)


def loads_dataset(blob: bytes) -> NoisyDataset:
    if len(blob) < _HEADER.size:
        raise DatasetFormatError("dataset container shorter than its header")
    magic, version, n, c, h, w, k, flags = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DatasetFormatError("not a dataset container: bad magic")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported dataset container version {version}")
    pos = _HEADER.size

    def take(count: int, dtype: str) -> np.ndarray:
        nonlocal pos
        nbytes = count * np.dtype(dtype).itemsize
        if pos + nbytes > len(blob):
            raise DatasetFormatError(f"truncated payload at byte {pos}")
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=pos).copy()
        pos += nbytes
        return arr

    images = take(n * c * h * w, "<f4").reshape(n, c, h, w)
    true_labels = take(n, "<i4").astype(np.int64)
    noisy, mask = true_labels.copy(), None
    if flags & FLAG_NOISY:
        noisy = take(n, "<i4").astype(np.int64)
        mask = take(n, "u1").astype(bool)
    names = None
    if flags & FLAG_NAMES:
        (length,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        names = json.loads(blob[pos : pos + length].decode("utf-8"))
        pos += length
    if pos != len(blob):
        raise DatasetFormatError(f"{len(blob) - pos} trailing bytes after payload")
    for name, labels in (("true", true_labels), ("noisy", noisy)):
        if n and (labels.min() < 0 or labels.max() >= k):
            raise DatasetFormatError(f"{name} labels outside [0, {k})")
    return NoisyDataset(images, true_labels, noisy, k, mask, names)


def save_dataset(path, ds: NoisyDataset) -> None:
    Path(path).write_bytes(dumps_dataset(ds))


def load_dataset(path) -> NoisyDataset:
    return loads_dataset(Path(path).read_bytes())


# -- CIFAR binaries ---------------------------------------------------------------
CIFAR_VARIANTS = {"cifar10": (1, 0, 10), "cifar100-fine": (2, 1, 100)}


def load_cifar_binary(paths: str | Path | Sequence, variant: str = "cifar10") -> NoisyDataset:
    """Read the standard CIFAR binary distribution (one or more batch files)."""
    if variant not in CIFAR_VARIANTS:
        raise ValueError(f"unknown CIFAR variant {variant!r}")
    n_label, label_pos, k = CIFAR_VARIANTS[variant]
    record = n_label + 3072
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size % record:
            whole = raw.size // record * record
            raise DatasetFormatError(f"{path}: truncated record at byte offset {whole} (record length {record})")
        recs = raw.reshape(-1, record)
        lab = recs[:, label_pos].astype(np.int64)
        bad = np.flatnonzero(lab >= k)
        if bad.size:
            offset = int(bad[0]) * record + label_pos
            raise DatasetFormatError(f"{path}: label {lab[bad[0]]} >= {k} at byte offset {offset}")
        images.append(recs[:, n_label:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
        labels.append(lab)
    names = list(CIFAR10_CLASSES) if variant == "cifar10" else None
    return NoisyDataset.clean(np.concatenate(images), np.concatenate(labels), k, names)


# -- synthetic shapes -------------------------------------------------------------
@dataclass
class SyntheticSpec:
    num_classes: int = 10
    n_train: int = 4000
    n_test: int = 1000
    channels: int = 3
    height: int = 16
    width: int = 16
    seed: int = 0
    pixel_noise: float = 0.12
    jitter: float = 0.3
    color_weight: float = 0.2
    distractors: int = 2


def _seg(a, b):
    """Distance from (a, b) to the segment {|a| <= 1, b = 0}."""
    return np.sqrt(np.maximum(np.abs(a) - 1, 0) ** 2 + b**2)


# Every template is symmetric under u -> -u so horizontal flips preserve the class.
_SHAPES = (
    lambda u, v: _seg(u, v),  # horizontal bar
    lambda u, v: _seg(v, u),  # vertical bar
    lambda u, v: np.minimum(_seg(u, v), _seg(v, u)),  # plus
    lambda u, v: np.minimum(_seg((u + v) / 1.4, (u - v) / 1.4), _seg((u - v) / 1.4, (u + v) / 1.4)),  # X
    lambda u, v: np.abs(np.hypot(u, v) - 0.8),  # ring
    lambda u, v: np.maximum(np.hypot(u, v) - 0.55, 0),  # disk
    lambda u, v: np.abs(np.maximum(np.abs(u), np.abs(v)) - 0.8),  # square outline
    lambda u, v: _seg(u, np.abs(v) - 0.6),  # two horizontal bars
    lambda u, v: _seg(v, np.abs(u) - 0.6),  # two vertical bars
    lambda u, v: np.minimum(_seg(u, v + 0.8), _seg((v - 0.1) / 0.9, u)),  # T
    lambda u, v: np.minimum(_seg(v, np.abs(u) - 0.8), _seg(u, v)),  # H
    lambda u, v: _seg(u * 0.7, v - 0.8 + 0.5 * np.abs(u)) ,  # chevron
)


def _class_colors(k: int, channels: int) -> np.ndarray:
    hues = (np.arange(k) * 0.61803398875) % 1.0
    phases = np.array([0.0, 1 / 3, 2 / 3])[:channels] if channels <= 3 else np.linspace(0, 1, channels, endpoint=False)
    return 0.55 + 0.4 * np.cos(2 * np.pi * (hues[:, None] - phases[None, :]))


def _render(labels: np.ndarray, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    n, c, h, w = len(labels), spec.channels, spec.height, spec.width
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    colors = _class_colors(spec.num_classes, c)
    # per-sample nuisance parameters, drawn in a fixed order
    shift = rng.uniform(-spec.jitter, spec.jitter, size=(n, 2))
    scale = rng.uniform(0.45, 0.65, size=n)
    thick = rng.uniform(0.12, 0.2, size=n)
    bg = rng.uniform(0.05, 0.45, size=(n, c))
    fg_jit = rng.normal(0, 0.12, size=(n, c))
    blob_pos = rng.uniform(-1, 1, size=(n, max(spec.distractors, 1), 2))
    blob_col = rng.uniform(0, 1, size=(n, max(spec.distractors, 1), c))
    rand_col = rng.uniform(0.2, 1, size=(n, c))
    noise = rng.normal(0, spec.pixel_noise, size=(n, c, h, w))

    images = np.empty((n, c, h, w))
    px = 2.0 / max(h - 1, 1)
    for i in range(n):
        k = labels[i]
        u = (xx - shift[i, 0]) / scale[i]
        v = (yy - shift[i, 1]) / scale[i]
        dist = _SHAPES[k % len(_SHAPES)](u, v) * scale[i]
        alpha = np.clip(0.5 + (thick[i] - dist) / px, 0, 1)
        base = np.broadcast_to(bg[i][:, None, None], (c, h, w))
        for j in range(spec.distractors):
            blob = 0.6 * np.exp(-((xx - blob_pos[i, j, 0]) ** 2 + (yy - blob_pos[i, j, 1]) ** 2) / 0.05)
            base = base * (1 - blob) + blob_col[i, j][:, None, None] * blob
        mix = spec.color_weight
        color = np.clip(mix * colors[k] + (1 - mix) * rand_col[i] + fg_jit[i], 0, 1)
        images[i] = base * (1 - alpha) + color[:, None, None] * alpha
    return np.clip(images + noise, 0, 1).astype(np.float32)


def generate_synthetic_dataset(spec: SyntheticSpec | None = None) -> tuple[NoisyDataset, NoisyDataset]:
    """Balanced class-conditional shape images; returns (train, test)."""
    spec = spec or SyntheticSpec()
    if spec.num_classes < 2:
        raise ValueError("synthetic dataset needs at least 2 classes")
    rng = np.random.default_rng(spec.seed)
    out = []
    for n in (spec.n_train, spec.n_test):
        labels = rng.permutation(np.arange(n) % spec.num_classes)
        out.append(NoisyDataset.clean(_render(labels, spec, rng), labels, spec.num_classes))
    return out[0], out[1]
