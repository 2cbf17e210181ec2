"""Prototype predictions, target sharpening, and the training loss.

Anchors and targets are both scored against a learnable prototype matrix by
cosine similarity and a temperature softmax.  Targets use the colder
temperature, are optionally rebalanced across prototypes with a few Sinkhorn
rounds, and are always detached: the loss is an average cross-entropy from
target to anchor plus a regularizer that rewards spreading the mean anchor
prediction over prototypes.  Minimizing

    (1/MB) sum_i sum_m H(target_i, anchor_{i,m}) - lambda * H(mean anchor)

moves gradients through anchor predictions and prototypes only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ParameterError, ShapeError, Tensor

LOG_EPS = 1e-12


@dataclass(frozen=True)
class LossConfig:
    tau_anchor: float = 0.1
    tau_target: float = 0.025
    lam: float = 1.0
    sinkhorn_enabled: bool = True
    sinkhorn_iters: int = 3

    def __post_init__(self):
        if not 0.0 < self.tau_anchor < 1.0 or not 0.0 < self.tau_target < 1.0:
            raise ParameterError("temperatures must lie in (0, 1)")
        if self.tau_target >= self.tau_anchor:
            raise ParameterError(
                f"target temperature {self.tau_target} must be colder than "
                f"anchor temperature {self.tau_anchor}")
        if self.lam < 0.0:
            raise ParameterError(f"lambda must be non-negative, got {self.lam}")


@dataclass
class Prototypes:
    q: Tensor  # [K, d], trainable; rows normalized at use time

    def __post_init__(self):
        if self.q.ndim != 2 or self.q.shape[0] < 2:
            raise ParameterError(
                f"prototype matrix must be [K>1, d], got shape {self.q.shape}")


def init_prototypes(k: int, d: int, rng: T.Rng) -> Prototypes:
    if k < 2:
        raise ParameterError(f"need at least 2 prototypes, got {k}")
    return Prototypes(Tensor(rng.child("init", "prototypes").normal((k, d), std=0.02),
                             requires_grad=True))


def predict_batch(z: Tensor, prototypes: Prototypes, temperature: float) -> Tensor:
    """[B, d] representations -> [B, K] rows on the simplex.

    Rows of z and of the prototype matrix are L2-normalized inside, so the
    logits are cosine similarities; zero vectors give uniform logits.
    """
    zn = T.l2_normalize(z)
    qn = T.l2_normalize(prototypes.q)
    return T.softmax(zn @ qn.transpose(1, 0), temperature)


def predict(z: Tensor, prototypes: Prototypes, temperature: float) -> Tensor:
    """Single representation [d] -> prediction [K]."""
    k = prototypes.q.shape[0]
    return predict_batch(z.reshape(1, z.shape[-1]), prototypes, temperature).reshape(k)


def sinkhorn(p: np.ndarray, iters: int) -> np.ndarray:
    """Rebalance a positive [B, K] matrix: columns toward mass B/K, rows back
    to distributions; each round ends on the row normalization."""
    b, k = p.shape
    out = p.copy()
    for _ in range(iters):
        out *= (b / k) / out.sum(axis=0, keepdims=True)
        out /= out.sum(axis=1, keepdims=True)
    return out


def sharpen_targets(z_targets: Tensor, prototypes: Prototypes,
                    config: LossConfig) -> Tensor:
    """[B, d] target representations -> detached [B, K] target distributions."""
    with_graph = predict_batch(z_targets.detach(),
                               Prototypes(prototypes.q.detach()),
                               config.tau_target)
    p = with_graph.data
    if config.sinkhorn_enabled:
        p = sinkhorn(p, config.sinkhorn_iters)
    return Tensor(p)


def cross_entropy(target: Tensor, anchor: Tensor) -> Tensor:
    """-sum(target * log(anchor + 1e-12)); gradient reaches the anchor only."""
    if target.shape != anchor.shape:
        raise ShapeError(f"distribution shapes differ: {target.shape} vs {anchor.shape}")
    return T.scale(T.tsum(T.mul(T.log(T.add(anchor, LOG_EPS)), target.data)), -1.0)


def me_max(anchor_preds: Tensor) -> Tensor:
    """Entropy of the mean anchor prediction (to be maximized)."""
    if anchor_preds.ndim != 2 or anchor_preds.shape[0] < 1:
        raise ShapeError(f"expected [n, K] predictions, got {anchor_preds.shape}")
    pbar = T.mean(anchor_preds, axis=0)
    return T.scale(T.tsum(T.xlogx(pbar)), -1.0)


def msn_loss(anchor_preds: Tensor, sharpened_targets: Tensor,
             config: LossConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Full objective over [M*B, K] anchors (view-major blocks of B) and
    [B, K] detached targets.  Returns (loss, ce_term, memax_term)."""
    mb, k = anchor_preds.shape
    b = sharpened_targets.shape[0]
    if sharpened_targets.ndim != 2 or sharpened_targets.shape[1] != k or mb % b != 0:
        raise ShapeError(
            f"anchors {anchor_preds.shape} do not pair with targets "
            f"{sharpened_targets.shape}")
    m = mb // b
    tiled = np.tile(sharpened_targets.data, (m, 1))
    per_row = T.mul(T.log(T.add(anchor_preds, LOG_EPS)), tiled)
    ce = T.scale(T.tsum(per_row), -1.0 / mb)
    ent = me_max(anchor_preds)
    loss = T.add(ce, T.scale(ent, -config.lam))
    return loss, ce, ent


def _uniform_rows(targets: np.ndarray, tol: float = 1e-9) -> bool:
    k = targets.shape[1]
    return bool((np.abs(targets - 1.0 / k).max(axis=1) < tol).any())


def collapse_gradient_check(z_batch: Tensor, targets: Tensor,
                            prototypes: Prototypes,
                            config: LossConfig) -> tuple[float, float]:
    """Gradient norms of the two loss terms w.r.t. (z, q) at the given batch.

    Rejects uniform target rows: the non-collapse guarantee assumes sharpened
    targets.  For any collapsed batch (all z equal) the two returned norms
    cannot both vanish: uniform anchor predictions leave a cross-entropy
    gradient, non-uniform ones leave a mean-entropy gradient.
    """
    if _uniform_rows(targets.data):
        raise ParameterError(
            "targets contain a uniform row; sharpened targets are required")

    def grad_norm(build) -> float:
        z = Tensor(z_batch.data.copy(), requires_grad=True)
        q = Prototypes(Tensor(prototypes.q.data.copy(), requires_grad=True))
        build(z, q).backward()
        total = 0.0
        for leaf in (z, q.q):
            if leaf.grad is not None:
                total += float((leaf.grad ** 2).sum())
        return float(np.sqrt(total))

    def ce_term(z, q):
        preds = predict_batch(z, q, config.tau_anchor)
        per_row = T.mul(T.log(T.add(preds, LOG_EPS)), targets.data)
        return T.scale(T.tsum(per_row), -1.0 / z.shape[0])

    def memax_term(z, q):
        return me_max(predict_batch(z, q, config.tau_anchor))

    return grad_norm(ce_term), grad_norm(memax_term)
