"""Weak / strong image augmentation, dual-view batching and mixup.

Randomness is drawn from a generator keyed by (seed, epoch, sample, view), so
an image's augmentation never depends on which batch it lands in.  Every
pipeline draws all of its random numbers up front in a fixed order, whether
or not a given transform fires.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

AUG_KINDS = ("none", "weak", "strong")


@dataclass
class AugPolicy:
    kind: str = "weak"
    crop_padding: int = 4
    flip_p: float = 0.5
    jitter: float = 0.4
    grayscale_p: float = 0.2
    blur_p: float = 0.5
    blur_sigma: list = field(default_factory=lambda: [0.1, 2.0])
    cutout_p: float = 1.0
    cutout_size: int | None = None

    def validate(self, height: int | None = None, width: int | None = None) -> None:
        if self.kind not in AUG_KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        for name in ("flip_p", "grayscale_p", "blur_p", "cutout_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")
        if self.crop_padding < 0 or not 0 <= self.jitter < 1:
            raise ValueError("crop_padding must be >= 0 and jitter in [0, 1)")
        lo, hi = self.blur_sigma
        if not 0 < lo <= hi:
            raise ValueError(f"blur_sigma must satisfy 0 < lo <= hi, got {self.blur_sigma}")
        if self.cutout_size is not None and height is not None:
            if not 0 <= self.cutout_size <= min(height, width):
                raise ValueError(f"cutout_size {self.cutout_size} exceeds image {height}x{width}")


def sample_rng(seed: int, epoch: int, index: int, view: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index, view])


# -- primitive transforms -------------------------------------------------------
def crop_flip(image: np.ndarray, dy: int, dx: int, flip: bool, padding: int = 4) -> np.ndarray:
    """Crop at offset (dy, dx) of the reflect-padded image, then optionally mirror."""
    c, h, w = image.shape
    if padding:
        padded = np.pad(image, ((0, 0), (padding, padding), (padding, padding)), mode="reflect")
        out = padded[:, dy : dy + h, dx : dx + w]
    else:
        out = image
    return out[:, :, ::-1].copy() if flip else out.copy()


def _luma(image: np.ndarray) -> np.ndarray:
    if image.shape[0] != 3:
        return image.mean(axis=0)
    return 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]


def color_jitter(image: np.ndarray, brightness: float, contrast: float, saturation: float) -> np.ndarray:
    out = np.clip(image * brightness, 0, 1)
    out = np.clip(_luma(out).mean() + contrast * (out - _luma(out).mean()), 0, 1)
    gray = _luma(out)[None]
    return np.clip(gray + saturation * (out - gray), 0, 1).astype(image.dtype, copy=False)


def grayscale(image: np.ndarray) -> np.ndarray:
    return np.broadcast_to(_luma(image)[None], image.shape).astype(image.dtype)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable blur with a reflect-padded kernel of radius ceil(3*sigma)."""
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    c, h, w = image.shape
    # reflect padding needs r < extent; clip the kernel support on tiny images
    if r >= min(h, w):
        r = min(h, w) - 1
        k = k[len(k) // 2 - r : len(k) // 2 + r + 1]
        k = k / k.sum()
    p = np.pad(image, ((0, 0), (r, r), (0, 0)), mode="reflect")
    tmp = sum(k[i] * p[:, i : i + h, :] for i in range(len(k)))
    p = np.pad(tmp, ((0, 0), (0, 0), (r, r)), mode="reflect")
    out = sum(k[i] * p[:, :, i : i + w] for i in range(len(k)))
    return out.astype(image.dtype, copy=False)


def cutout(image: np.ndarray, cy: int, cx: int, size: int) -> np.ndarray:
    """Zero an s×s square centred at (cy, cx), clipped at the borders."""
    out = image.copy()
    h, w = image.shape[1:]
    y0, x0 = max(cy - size // 2, 0), max(cx - size // 2, 0)
    y1, x1 = min(cy - size // 2 + size, h), min(cx - size // 2 + size, w)
    out[:, y0:y1, x0:x1] = 0
    return out


# -- pipelines ----------------------------------------------------------------
# Random parameters are drawn per sample from its keyed generator; the
# transforms themselves run over the whole batch.  Single-image entry points
# are batches of one, so both paths agree exactly.
def _draw(rng: np.random.Generator, policy: AugPolicy, h: int, w: int) -> tuple:
    p = policy.crop_padding
    dy, dx = rng.integers(0, 2 * p + 1, size=2)
    flip = rng.random() < policy.flip_p
    if policy.kind != "strong":
        return (dy, dx, flip)
    j = policy.jitter
    b, c, s = rng.uniform(1 - j, 1 + j, size=3)
    u_gray, u_blur, u_cut = rng.random(3)
    sigma = rng.uniform(*policy.blur_sigma)
    cy, cx = rng.integers(0, h), rng.integers(0, w)
    return (dy, dx, flip, b, c, s, u_gray, u_blur, u_cut, sigma, cy, cx)


def _crop_flip_batch(x: np.ndarray, dy, dx, flip, padding: int) -> np.ndarray:
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), mode="reflect")
    rows = np.asarray(dy)[:, None] + np.arange(h)
    cols = np.asarray(dx)[:, None] + np.arange(w)
    cols = np.where(np.asarray(flip)[:, None], cols[:, ::-1], cols)
    return x[np.arange(n)[:, None, None, None], np.arange(c)[None, :, None, None],
             rows[:, None, :, None], cols[:, None, None, :]]


def _luma_batch(x: np.ndarray) -> np.ndarray:
    if x.shape[1] != 3:
        return x.mean(axis=1)
    return 0.299 * x[:, 0] + 0.587 * x[:, 1] + 0.114 * x[:, 2]


def _blur_batch(x: np.ndarray, sigmas: np.ndarray) -> np.ndarray:
    h, w = x.shape[2:]
    limit = min(h, w) - 1
    kernels = []
    for sigma in sigmas:
        k = gaussian_kernel(float(sigma))
        r = len(k) // 2
        if r > limit:
            k = k[r - limit : r + limit + 1]
            k = k / k.sum()
        kernels.append(k)
    big = max(len(k) for k in kernels) // 2
    taps = np.zeros((len(x), 2 * big + 1))
    for i, k in enumerate(kernels):
        r = len(k) // 2
        taps[i, big - r : big + r + 1] = k
    t = taps[:, :, None, None, None]
    p = np.pad(x, ((0, 0), (0, 0), (big, big), (0, 0)), mode="reflect")
    tmp = sum(t[:, i] * p[:, :, i : i + h, :] for i in range(2 * big + 1))
    p = np.pad(tmp, ((0, 0), (0, 0), (0, 0), (big, big)), mode="reflect")
    return sum(t[:, i] * p[:, :, :, i : i + w] for i in range(2 * big + 1))


def _strong_batch(x: np.ndarray, params: np.ndarray, policy: AugPolicy) -> np.ndarray:
    n, c, h, w = x.shape
    dy, dx, flip, b, con, sat, u_gray, u_blur, u_cut, sigma, cy, cx = params.T
    out = _crop_flip_batch(x, dy.astype(int), dx.astype(int), flip.astype(bool), policy.crop_padding)
    out = out.astype(np.float64)
    if policy.jitter > 0:
        out = np.clip(out * b[:, None, None, None], 0, 1)
        mean = _luma_batch(out).mean(axis=(1, 2))[:, None, None, None]
        out = np.clip(mean + con[:, None, None, None] * (out - mean), 0, 1)
        gray = _luma_batch(out)[:, None]
        out = np.clip(gray + sat[:, None, None, None] * (out - gray), 0, 1)
    g = u_gray < policy.grayscale_p
    if g.any():
        out[g] = _luma_batch(out[g])[:, None]
    bl = u_blur < policy.blur_p
    if bl.any():
        out[bl] = _blur_batch(out[bl], sigma[bl])
    cut = u_cut < policy.cutout_p
    if cut.any():
        size = policy.cutout_size if policy.cutout_size is not None else min(h, w) // 2
        y0, x0 = cy.astype(int) - size // 2, cx.astype(int) - size // 2
        ys, xs = np.arange(h), np.arange(w)
        rows = (ys >= y0[:, None]) & (ys < y0[:, None] + size)
        cols = (xs >= x0[:, None]) & (xs < x0[:, None] + size)
        hole = rows[:, :, None] & cols[:, None, :] & cut[:, None, None]
        out[np.broadcast_to(hole[:, None], out.shape)] = 0
    return np.clip(out, 0, 1).astype(x.dtype, copy=False)


def _augment(x: np.ndarray, rngs, policy: AugPolicy) -> np.ndarray:
    if policy.kind == "none":
        return x.copy()
    h, w = x.shape[2:]
    params = np.array([_draw(r, policy, h, w) for r in rngs], dtype=np.float64)
    if policy.kind == "weak":
        dy, dx, flip = params.T
        return _crop_flip_batch(x, dy.astype(int), dx.astype(int), flip.astype(bool), policy.crop_padding)
    return _strong_batch(x, params, policy)


def weak_augment(image: np.ndarray, rng: np.random.Generator, policy: AugPolicy | None = None) -> np.ndarray:
    """Crop from the reflect-padded image, then a random horizontal flip."""
    policy = replace(policy, kind="weak") if policy else AugPolicy(kind="weak")
    return _augment(image[None], [rng], policy)[0]


def strong_augment(image: np.ndarray, rng: np.random.Generator, policy: AugPolicy | None = None) -> np.ndarray:
    """Crop/flip, colour jitter, grayscale, blur, cutout, in that order."""
    policy = replace(policy, kind="strong") if policy else AugPolicy(kind="strong")
    return _augment(image[None], [rng], policy)[0]


def apply_policy(image: np.ndarray, rng: np.random.Generator, policy: AugPolicy) -> np.ndarray:
    return _augment(image[None], [rng], policy)[0]


def augment_batch(images: np.ndarray, indices: np.ndarray, epoch: int, seed: int,
                  policy: AugPolicy, view: int) -> np.ndarray:
    """Augment ``images[indices]`` with per-sample keys (seed, epoch, index, view)."""
    indices = np.asarray(indices)
    rngs = [] if policy.kind == "none" else [sample_rng(seed, epoch, int(i), view) for i in indices]
    return _augment(images[indices], rngs, policy)


def augment_keyed(images: np.ndarray, keys, seed: int, epoch: int, policy: AugPolicy, view: int) -> np.ndarray:
    """Augment each image with its own key in place of its dataset index."""
    rngs = [] if policy.kind == "none" else [sample_rng(seed, epoch, int(k), view) for k in keys]
    return _augment(images, rngs, policy)


def make_dual_batch(images: np.ndarray, labels: np.ndarray, indices, epoch: int, seed: int,
                    policies: tuple[AugPolicy, AugPolicy]):
    """Weak views of ``indices`` followed by strong views of the same samples.

    Returns ``(x, y, view)`` with 2N rows; ``view`` is 0 for weak, 1 for strong.
    """
    indices = np.asarray(indices)
    weak, strong = policies
    x = np.concatenate([
        augment_batch(images, indices, epoch, seed, weak, 0),
        augment_batch(images, indices, epoch, seed, strong, 1),
    ])
    y = np.concatenate([labels[indices], labels[indices]])
    view = np.repeat(np.array([0, 1]), len(indices))
    return x, y, view


def mixup(xa: np.ndarray, pa: np.ndarray, xb: np.ndarray, pb: np.ndarray, lam: float):
    """Convex combination lam*a + (1-lam)*b of inputs and of target rows."""
    if xa.shape != xb.shape or pa.shape != pb.shape or len(xa) != len(pa):
        raise ValueError(f"mixup: incompatible shapes {xa.shape}/{pa.shape} and {xb.shape}/{pb.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixup: lambda must lie in [0, 1], got {lam}")
    return lam * xa + (1 - lam) * xb, lam * pa + (1 - lam) * pb
