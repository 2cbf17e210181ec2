"""Datasets, augmentation, and low-shot splits.

Images are float64 [C, H, W] arrays in [0, 1].  Each training example yields
one unmasked target view and M anchor views; anchors draw their own
augmentation parameters unless an ablation mode ties them to the target.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from scipy.ndimage import gaussian_filter1d

from . import tensor as T
from .tensor import ParameterError

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


class FormatError(ValueError):
    """Byte stream does not follow the declared dataset layout."""


@dataclass
class ImageRecord:
    pixels: np.ndarray  # [C, H, W] in [0, 1]
    label: int | None = None

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.ndim != 3 or p.shape[0] not in (1, 3):
            raise ParameterError(f"expected [C, H, W] pixels, got {p.shape}")
        if p.min() < 0.0 or p.max() > 1.0:
            raise ParameterError("pixel values must lie in [0, 1]")
        self.pixels = p


# ---------------------------------------------------------------------------
# CIFAR-10 binary format
# ---------------------------------------------------------------------------


def decode_cifar10(blob: bytes) -> list[ImageRecord]:
    if len(blob) % CIFAR_RECORD_BYTES != 0:
        raise FormatError(
            f"{len(blob)} bytes is not a whole number of {CIFAR_RECORD_BYTES}-byte "
            f"records")
    records = []
    for off in range(0, len(blob), CIFAR_RECORD_BYTES):
        label = blob[off]
        if label > 9:
            raise FormatError(f"label byte {label} at offset {off} exceeds 9")
        pix = np.frombuffer(blob, dtype=np.uint8, count=3072, offset=off + 1)
        records.append(ImageRecord(pix.reshape(3, 32, 32) / 255.0, int(label)))
    return records


def load_cifar10(path: str) -> list[ImageRecord]:
    with open(path, "rb") as fh:
        return decode_cifar10(fh.read())


def encode_cifar10_record(rec: ImageRecord) -> bytes:
    """Inverse of decoding: quantize back to the 3073-byte record."""
    if rec.label is None or not 0 <= rec.label <= 9:
        raise FormatError(f"record label {rec.label} not in 0..9")
    pix = np.round(rec.pixels * 255.0).astype(np.uint8)
    return bytes([rec.label]) + pix.tobytes()


# ---------------------------------------------------------------------------
# Synthetic dataset
# ---------------------------------------------------------------------------

# Color bank shared by class signatures and distractor clutter.  Class
# identity is a shape x color conjunction (colors repeat across classes), so
# no single channel statistic separates the classes.
_PALETTE = np.array([
    [0.95, 0.25, 0.20], [0.20, 0.90, 0.30], [0.25, 0.35, 0.95],
    [0.92, 0.85, 0.20], [0.85, 0.25, 0.90], [0.20, 0.88, 0.88],
    [0.95, 0.55, 0.15], [0.55, 0.95, 0.55],
])

N_SHAPE_KINDS = 4


def _shape_mask(kind: int, cx: float, cy: float, radius: float,
                size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    if kind == 0:        # filled disk
        return dx * dx + dy * dy <= radius * radius
    if kind == 1:        # square ring
        dist = np.maximum(np.abs(dx), np.abs(dy))
        return (dist <= radius) & (dist >= 0.55 * radius)
    if kind == 2:        # plus sign
        arm = 0.38 * radius
        return ((np.abs(dx) <= arm) | (np.abs(dy) <= arm)) \
            & (np.maximum(np.abs(dx), np.abs(dy)) <= radius)
    # diagonal stripes clipped to a disk
    period = max(2.0, radius / 1.5)
    stripe = ((xx + yy) % period) < 0.5 * period
    return stripe & (dx * dx + dy * dy <= radius * radius)


def _paint(img: np.ndarray, mask: np.ndarray, color: np.ndarray,
           brightness: float, kind: int, size: int) -> np.ndarray:
    xx = np.arange(size, dtype=np.float64)[None, :] * np.ones((size, 1))
    texture = 0.85 + 0.15 * np.sin(2.0 * np.pi * (xx / size) * (2 + kind))
    fg = color[:, None, None] * brightness * (texture * mask)[None]
    return np.where(mask[None], fg, img)


def _render(kind: int, color: np.ndarray, size: int, rng: T.Rng) -> np.ndarray:
    gen = rng.generator()
    img = gen.uniform(0.0, 0.3, size=(3, size, size))
    # distractor clutter first so the class shape occludes it
    for _ in range(2):
        dkind = int(gen.integers(0, N_SHAPE_KINDS))
        dcolor = _PALETTE[int(gen.integers(0, len(_PALETTE)))]
        dcx, dcy = gen.uniform(0.10, 0.90, size=2) * size
        drad = gen.uniform(0.08, 0.15) * size
        img = _paint(img, _shape_mask(dkind, dcx, dcy, drad, size), dcolor,
                     gen.uniform(0.5, 1.0), dkind, size)
    cx, cy = gen.uniform(0.30, 0.70, size=2) * size
    radius = gen.uniform(0.20, 0.34) * size
    img = _paint(img, _shape_mask(kind, cx, cy, radius, size), color,
                 gen.uniform(0.5, 1.0), kind, size)
    return np.clip(img, 0.0, 1.0)


def class_signature(c: int) -> tuple[int, int]:
    """(shape kind, palette row) for class c; four colors serve eight classes,
    so the pair, not either part, identifies the class."""
    kind = c % N_SHAPE_KINDS
    color = (c % N_SHAPE_KINDS + c // N_SHAPE_KINDS) % N_SHAPE_KINDS
    return kind, color


def synth_dataset(classes: int, per_class: int, image_size: int,
                  rng: T.Rng) -> list[ImageRecord]:
    """Balanced procedural dataset: each class is one shape/color signature
    rendered at a random place, scale, and brightness over clutter."""
    if classes < 2:
        raise ParameterError(f"need at least 2 classes, got {classes}")
    if per_class < 1:
        raise ParameterError(f"need at least 1 image per class, got {per_class}")
    records = []
    for c in range(classes):
        kind, color_idx = class_signature(c)
        color = _PALETTE[color_idx]
        for i in range(per_class):
            pix = _render(kind, color, image_size, rng.child("synth", c, i))
            records.append(ImageRecord(pix, c))
    return records


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentPolicy:
    n_anchors: int = 3
    anchor_mode: str = "independent"   # independent | color_only | shared
    crop_scale_min: float = 0.3
    flip_prob: float = 0.5
    jitter_strength: float = 0.4
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple = (0.1, 2.0)
    geometry_enabled: bool = True
    color_enabled: bool = True

    def __post_init__(self):
        if self.n_anchors < 1:
            raise ParameterError("need at least one anchor view")
        if self.anchor_mode not in ("independent", "color_only", "shared"):
            raise ParameterError(f"unknown anchor_mode {self.anchor_mode!r}")
        if not 0.0 < self.crop_scale_min <= 1.0:
            raise ParameterError("crop_scale_min must lie in (0, 1]")


@lru_cache(maxsize=None)
def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    # align-corners sampling keeps the crop's extreme pixels at the borders
    if n_in == 1:
        m = np.ones((n_out, 1))
    else:
        xs = np.linspace(0.0, n_in - 1.0, n_out)
        lo = np.clip(np.floor(xs).astype(np.int64), 0, n_in - 2)
        frac = xs - lo
        m = np.zeros((n_out, n_in))
        rows = np.arange(n_out)
        m[rows, lo] = 1.0 - frac
        m[rows, lo + 1] += frac
    m.setflags(write=False)  # cached across calls, so freeze it
    return m


def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img
    ry = _interp_matrix(out_h, h)
    rx = _interp_matrix(out_w, w)
    return ry @ img @ rx.T


def _random_crop(img: np.ndarray, policy: AugmentPolicy,
                 gen: np.random.Generator) -> np.ndarray:
    c, h, w = img.shape
    area = h * w
    for _ in range(10):
        scale = gen.uniform(policy.crop_scale_min, 1.0)
        ratio = np.exp(gen.uniform(np.log(3 / 4), np.log(4 / 3)))
        ch = int(round(np.sqrt(area * scale / ratio)))
        cw = int(round(np.sqrt(area * scale * ratio)))
        if 1 <= ch <= h and 1 <= cw <= w:
            top = int(gen.integers(0, h - ch + 1))
            left = int(gen.integers(0, w - cw + 1))
            patch = img[:, top:top + ch, left:left + cw]
            return _bilinear_resize(patch, h, w)
    return img.copy()  # clamped fallback: degenerate aspect draws exhausted


def _color_jitter(img: np.ndarray, policy: AugmentPolicy,
                  gen: np.random.Generator) -> np.ndarray:
    out = img
    s = policy.jitter_strength
    if gen.uniform() < policy.jitter_prob:
        out = out * gen.uniform(1 - s, 1 + s)                      # brightness
        out = (out - out.mean()) * gen.uniform(1 - s, 1 + s) + out.mean()
        gray = (GRAY_WEIGHTS @ out.reshape(3, -1)).reshape(out.shape[1:])
        sat = gen.uniform(1 - s, 1 + s)
        out = gray[None] + (out - gray[None]) * sat
        out = np.clip(out, 0.0, 1.0)
    if gen.uniform() < policy.grayscale_prob:
        gray = (GRAY_WEIGHTS @ out.reshape(3, -1)).reshape(out.shape[1:])
        out = np.repeat(gray[None], 3, axis=0)
    if gen.uniform() < policy.blur_prob:
        sigma = gen.uniform(*policy.blur_sigma)
        out = gaussian_filter1d(gaussian_filter1d(out, sigma, axis=1), sigma, axis=2)
        out = np.clip(out, 0.0, 1.0)
    return out


def _geometry(img: np.ndarray, policy: AugmentPolicy,
              gen: np.random.Generator) -> np.ndarray:
    if not policy.geometry_enabled:
        return img.copy()
    out = _random_crop(img, policy, gen)
    if gen.uniform() < policy.flip_prob:
        out = out[:, :, ::-1].copy()
    return out


def _color(img: np.ndarray, policy: AugmentPolicy,
           gen: np.random.Generator) -> np.ndarray:
    if not policy.color_enabled:
        return img
    return _color_jitter(img, policy, gen)


def augment(image: ImageRecord, rng: T.Rng,
            policy: AugmentPolicy) -> tuple[np.ndarray, list[np.ndarray]]:
    """One target view plus policy.n_anchors anchor views.

    Each view burns one keyed stream from `rng` and draws its parameters
    sequentially.  anchor_mode 'shared' reuses the target's pixels outright;
    'color_only' reuses its geometry (crop and flip) but redraws color;
    'independent' redraws everything per view.
    """
    src = image.pixels
    tgen = rng.child("view", "target").generator()
    target_geom = _geometry(src, policy, tgen)
    target = _color(target_geom, policy, tgen)
    anchors = []
    for m in range(policy.n_anchors):
        if policy.anchor_mode == "shared":
            anchors.append(target.copy())
            continue
        agen = rng.child("view", m).generator()
        if policy.anchor_mode == "color_only":
            anchors.append(_color(target_geom, policy, agen))
        else:
            anchors.append(_color(_geometry(src, policy, agen), policy, agen))
    return target, anchors


# ---------------------------------------------------------------------------
# Low-shot splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LowShotSplit:
    images_per_class: int
    seed: int
    train_indices: np.ndarray  # k picks per class, flattened
    eval_indices: np.ndarray   # fixed held-out pool, seed-independent


def eval_pool_indices(labels: np.ndarray, eval_fraction: float = 0.2) -> np.ndarray:
    """Deterministic held-out set: the last fraction of each class's indices."""
    out = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        n_eval = max(1, int(round(eval_fraction * len(idx))))
        out.append(idx[len(idx) - n_eval:])
    return np.concatenate(out)


def make_lowshot_split(dataset: list[ImageRecord], k: int, seed: int,
                       eval_fraction: float = 0.2) -> LowShotSplit:
    if any(r.label is None for r in dataset):
        raise ParameterError("low-shot split needs labeled records")
    labels = np.array([r.label for r in dataset])
    eval_idx = eval_pool_indices(labels, eval_fraction)
    eval_set = set(eval_idx.tolist())
    picks = []
    for c in np.unique(labels):
        pool = np.array([i for i in np.flatnonzero(labels == c)
                         if i not in eval_set])
        if len(pool) < k:
            raise ParameterError(
                f"class {c} has {len(pool)} train images, fewer than k={k}")
        chosen = T.Rng(seed).child("lowshot", int(c)).choice_without_replacement(
            len(pool), k)
        picks.append(pool[np.sort(chosen)])
    return LowShotSplit(k, seed, np.concatenate(picks), eval_idx)
