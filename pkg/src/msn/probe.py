"""Frozen-feature evaluation: L2-regularized softmax regression on trunk
outputs, low-shot splits, and masked-representation similarity."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import ImageRecord, LowShotSplit, make_lowshot_split
from .encoder import (EncoderConfig, ParameterSet, PatchSequence, embed_batch,
                      patchify, trunk_batch)
from .masking import MaskSpec, apply_mask, draw_mask
from .tensor import ParameterError

LAMBDA_GRID = (1e-4, 1e-3, 1e-2)


@dataclass
class FeatureBank:
    features: np.ndarray  # [N, d_enc] trunk CLS outputs
    labels: np.ndarray    # [N] class ids


@dataclass(frozen=True)
class ProbeConfig:
    l2_strength: float = 1e-3
    max_iters: int = 500
    tol: float = 1e-5

    def __post_init__(self):
        if self.l2_strength <= 0:
            raise ParameterError("l2_strength must be positive for strong convexity")


@dataclass
class ProbeResult:
    weights: np.ndarray   # [d, C]
    classes: np.ndarray   # class ids, column order
    converged: bool
    n_iters: int
    objective: float


# ---------------------------------------------------------------------------
# Feature extraction (projection head never touches this path)
# ---------------------------------------------------------------------------


def _trunk_vectors(seqs: list[PatchSequence], params: ParameterSet,
                   cfg: EncoderConfig) -> np.ndarray:
    return trunk_batch(embed_batch(seqs, params, cfg), params, cfg).data


def extract_features(params: ParameterSet, cfg: EncoderConfig,
                     dataset: list[ImageRecord],
                     mask: MaskSpec | None = None,
                     seed: int = 0, batch: int = 256) -> FeatureBank:
    """One trunk feature per image, no augmentation; an optional mask spec is
    drawn fresh per image from a fixed stream before encoding."""
    rng = T.Rng(seed)
    feats = []
    for start in range(0, len(dataset), batch):
        chunk = dataset[start:start + batch]
        seqs = []
        for j, rec in enumerate(chunk):
            seq = patchify(rec.pixels, cfg.patch_size)
            if mask is not None and mask.kind != "none":
                m = draw_mask(mask, cfg.grid, cfg.grid,
                              rng.child("probe_mask", start + j))
                seq = apply_mask(seq, m)
            seqs.append(seq)
        feats.append(_trunk_vectors(seqs, params, cfg))
    labels = np.array([-1 if r.label is None else r.label for r in dataset])
    return FeatureBank(np.concatenate(feats, axis=0), labels)


def l2_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.where(norms < 1e-12, 0.0, x / np.maximum(norms, 1e-12))


# ---------------------------------------------------------------------------
# Probe fitting: full-batch descent with backtracking on a strongly convex
# objective, so the optimum is unique and order-independent.
# ---------------------------------------------------------------------------


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _objective_and_grad(w: np.ndarray, x: np.ndarray, y_onehot: np.ndarray,
                        lam: float) -> tuple[float, np.ndarray]:
    n = x.shape[0]
    probs = _softmax_rows(x @ w)
    obj = -np.log((probs * y_onehot).sum(axis=1) + 1e-300).mean() \
        + 0.5 * lam * float((w * w).sum())
    grad = x.T @ (probs - y_onehot) / n + lam * w
    return obj, grad


def fit_logistic(bank: FeatureBank, config: ProbeConfig) -> ProbeResult:
    """Minimize mean cross-entropy + (l2/2)||W||^2 to gradient norm < tol."""
    classes = np.unique(bank.labels)
    col = {c: j for j, c in enumerate(classes)}
    x = bank.features
    y = np.zeros((x.shape[0], len(classes)))
    y[np.arange(x.shape[0]), [col[c] for c in bank.labels]] = 1.0

    w = np.zeros((x.shape[1], len(classes)))
    obj, grad = _objective_and_grad(w, x, y, config.l2_strength)
    step = 10.0
    iters = 0
    converged = False
    for iters in range(1, config.max_iters + 1):
        gnorm2 = float((grad * grad).sum())
        if np.sqrt(gnorm2) < config.tol:
            converged = True
            iters -= 1
            break
        # Armijo backtracking from a slightly grown previous step
        step = min(step * 2.0, 1e4)
        while True:
            cand = w - step * grad
            cobj, cgrad = _objective_and_grad(cand, x, y, config.l2_strength)
            if cobj <= obj - 0.5 * step * gnorm2 or step < 1e-12:
                break
            step *= 0.5
        w, obj, grad = cand, cobj, cgrad
    else:
        converged = np.sqrt(float((grad * grad).sum())) < config.tol
    return ProbeResult(w, classes, converged, iters, obj)


def probe_accuracy(result: ProbeResult, features: np.ndarray,
                   labels: np.ndarray) -> float:
    pred = result.classes[np.argmax(features @ result.weights, axis=1)]
    return float((pred == labels).mean())


# ---------------------------------------------------------------------------
# Low-shot protocol
# ---------------------------------------------------------------------------


@dataclass
class LowShotReport:
    k: int
    seeds: list[int]
    per_seed_top1: list[float]
    mean_top1: float = field(init=False)
    std_top1: float = field(init=False)

    def __post_init__(self):
        self.mean_top1 = float(np.mean(self.per_seed_top1))
        self.std_top1 = float(np.std(self.per_seed_top1))  # population std


def _select_l2(x: np.ndarray, labels: np.ndarray, seed: int,
               config: ProbeConfig) -> float:
    """Pick the regularizer by a held-out fifth; fall back to the middle of
    the grid when the probe set is too small to split."""
    n = x.shape[0]
    n_val = n // 5
    if n_val < 1 or n - n_val < 2:
        return LAMBDA_GRID[1]
    order = T.Rng(seed).child("l2val").permutation(n)
    val, fit = order[:n_val], order[n_val:]
    if len(np.unique(labels[fit])) < 2:
        return LAMBDA_GRID[1]
    best, best_acc = LAMBDA_GRID[1], -1.0
    for lam in LAMBDA_GRID:
        res = fit_logistic(FeatureBank(x[fit], labels[fit]),
                           ProbeConfig(lam, config.max_iters, config.tol))
        acc = probe_accuracy(res, x[val], labels[val])
        if acc > best_acc:
            best, best_acc = lam, acc
    return best


def lowshot_eval(params: ParameterSet, cfg: EncoderConfig,
                 dataset: list[ImageRecord], k: int, seeds: list[int],
                 config: ProbeConfig = ProbeConfig(),
                 bank: FeatureBank | None = None) -> LowShotReport:
    """Mean and population-std top-1 over per-seed k-shot splits.

    Features are extracted once (or passed in), L2-normalized, then each seed
    fits its own probe on its own split and scores the fixed held-out pool.
    """
    if bank is None:
        bank = extract_features(params, cfg, dataset)
    feats = l2_rows(bank.features)
    accs = []
    for seed in seeds:
        split = make_lowshot_split(dataset, k, seed)
        x_fit, y_fit = feats[split.train_indices], bank.labels[split.train_indices]
        lam = _select_l2(x_fit, y_fit, seed, config)
        res = fit_logistic(FeatureBank(x_fit, y_fit),
                           ProbeConfig(lam, config.max_iters, config.tol))
        accs.append(probe_accuracy(res, feats[split.eval_indices],
                                   bank.labels[split.eval_indices]))
    return LowShotReport(k=k, seeds=list(seeds), per_seed_top1=accs)


def mask_invariance(params: ParameterSet, cfg: EncoderConfig,
                    dataset: list[ImageRecord], ratio: float,
                    seed: int = 0) -> float:
    """Mean cosine similarity between masked and unmasked trunk features,
    fresh mask per image from a fixed stream."""
    if not 0.0 <= ratio < 1.0:
        raise ParameterError(f"ratio must be in [0, 1), got {ratio}")
    full = extract_features(params, cfg, dataset)
    if ratio == 0.0:
        return 1.0
    masked = extract_features(params, cfg, dataset,
                              mask=MaskSpec("random", ratio=ratio), seed=seed)
    a, b = l2_rows(full.features), l2_rows(masked.features)
    return float((a * b).sum(axis=1).mean())