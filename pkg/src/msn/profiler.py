"""Compute-cost accounting for masked-view training.

Masking trims the anchor sequence before the trunk ever runs, so anchor
compute falls with the kept-patch count: linearly in the embedding, linear
layers, and MLP, quadratically in attention.  This module prices a view's
forward pass analytically in GEMM FLOPs (exact against the engine's own
multiply counter), and measures wall time per view and per optimization
step.  Timings assume the caller already pinned BLAS to the thread budget
it wants to report.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .encoder import PatchSequence, encode_batch, init_params
from .masking import MaskSpec, default_focal_block, keep_count
from .objective import init_prototypes, predict_batch
from .tensor import ParameterError


def kept_patches(spec: MaskSpec, grid: int) -> int:
    """Patch tokens surviving a mask of this kind on a grid x grid image."""
    if spec.kind == "none":
        return grid * grid
    if spec.kind == "random":
        return keep_count(grid * grid, spec.ratio)
    bh, bw = (spec.block_h, spec.block_w) if spec.block_h is not None \
        else default_focal_block(grid, grid)
    return bh * bw


def forward_macs(config: TrainConfig, n_patches: int) -> int:
    """Exact GEMM multiply count for one image's forward pass.

    Covers patch embedding, the trunk over n_patches + 1 tokens (the
    class token rides along), the projection head, and prototype scores.
    Elementwise work (norms, activations, softmax) is excluded, matching
    the engine's multiply counter.
    """
    if n_patches < 1:
        raise ParameterError(f"need at least one kept patch, got {n_patches}")
    enc = config.encoder_config()
    d = enc.hidden_dim
    h = enc.mlp_hidden
    s = n_patches + 1
    embed = n_patches * enc.token_dim * d
    per_layer = 4 * s * d * d + 2 * s * s * d + 2 * s * d * h
    hw = enc.head_width
    head = d * hw + hw * hw + hw * enc.head_output_dim
    scores = enc.head_output_dim * config.prototypes
    return embed + enc.depth * per_layer + head + scores


def flops_forward(config: TrainConfig, n_patches: int) -> int:
    """Forward GEMM FLOPs per image: two per multiply-accumulate."""
    return 2 * forward_macs(config, n_patches)


@dataclass(frozen=True)
class ViewCost:
    kind: str        # mask kind, or "none" for the full view
    n_patches: int
    flops: int       # analytic forward FLOPs per image
    ms: float        # measured wall time per batch, forward (+ backward)


@dataclass(frozen=True)
class StepCost:
    step_ms: float   # median optimization step, end to end
    peak_bytes: int  # tensor-storage high-water mark across measured steps


@dataclass(frozen=True)
class SweepPoint:
    ratio: float
    n_patches: int
    flops: int
    ms: float


@dataclass(frozen=True)
class CostReport:
    target: ViewCost
    anchors: tuple[ViewCost, ...]
    step: StepCost
    flop_ratio: float  # masked anchor FLOPs over unmasked anchor FLOPs


def _timed_batch(config: TrainConfig, n_patches: int, repeats: int,
                 include_backward: bool, seed: int = 0) -> float:
    """Median wall time (ms) to push one batch of n_patches-token views
    through embed, trunk, head, and prototype scores; optionally backward."""
    if repeats < 1:
        raise ParameterError(f"repeats must be positive, got {repeats}")
    enc = config.encoder_config()
    if n_patches > enc.n_patches:
        raise ParameterError(
            f"{n_patches} kept patches exceed the {enc.n_patches}-patch grid")
    rng = T.Rng(seed)
    params = init_params(enc, rng)
    protos = init_prototypes(config.prototypes, config.head_output_dim, rng)
    gen = rng.child("profile_tokens").generator()
    mode = "train" if include_backward else "eval"
    seqs = [PatchSequence(T.tensor(gen.normal(size=(n_patches, enc.token_dim))),
                          np.arange(n_patches))
            for _ in range(config.batch_size)]

    def run():
        _, projected = encode_batch(seqs, params, enc, mode=mode)
        preds = predict_batch(projected, protos, config.tau_anchor)
        if include_backward:
            T.tsum(T.mul(preds, preds)).backward()
            for t in params.tensors.values():
                t.zero_grad()
            protos.q.zero_grad()

    run()  # warmup: touches allocator pools and BLAS internals
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        run()
        times.append(time.perf_counter() - t0)
    return float(np.median(times) * 1000.0)


def measure_view_ms(config: TrainConfig, n_patches: int, repeats: int = 5,
                    include_backward: bool = True) -> float:
    return _timed_batch(config, n_patches, repeats, include_backward)


def measure_step(config: TrainConfig, dataset=None, steps: int = 5,
                 warmup: int = 1) -> StepCost:
    """Median wall time of real optimization steps on a fresh run."""
    from .train import build_dataset, init_run, train_step
    if steps < 1:
        raise ParameterError(f"steps must be positive, got {steps}")
    if dataset is None:
        dataset = build_dataset(config)
    state = init_run(config)
    for _ in range(warmup):
        train_step(state, dataset)
    T.reset_peak_tensor_bytes()
    times = []
    for _ in range(steps):
        t0 = time.perf_counter()
        train_step(state, dataset)
        times.append(time.perf_counter() - t0)
    return StepCost(step_ms=float(np.median(times) * 1000.0),
                    peak_bytes=T.peak_tensor_bytes())


def masking_sweep(config: TrainConfig, ratios, repeats: int = 5) -> list[SweepPoint]:
    """Cost of one anchor batch at each masking ratio, dearest first kept
    in input order; ratio 0 is the unmasked reference."""
    grid = config.encoder_config().grid
    points = []
    for r in ratios:
        spec = MaskSpec(kind="none") if r == 0 else MaskSpec(kind="random", ratio=r)
        n = kept_patches(spec, grid)
        points.append(SweepPoint(
            ratio=float(r), n_patches=n, flops=flops_forward(config, n),
            ms=measure_view_ms(config, n, repeats=repeats)))
    return points


def cost_report(config: TrainConfig, dataset=None, repeats: int = 5,
                steps: int = 5) -> CostReport:
    enc = config.encoder_config()
    full = enc.n_patches
    target = ViewCost(kind="none", n_patches=full,
                      flops=flops_forward(config, full),
                      ms=measure_view_ms(config, full, repeats=repeats,
                                         include_backward=False))
    anchors = []
    for spec in config.mask_specs():
        n = kept_patches(spec, enc.grid)
        anchors.append(ViewCost(kind=spec.kind, n_patches=n,
                                flops=flops_forward(config, n),
                                ms=measure_view_ms(config, n, repeats=repeats)))
    masked = sum(a.flops for a in anchors)
    unmasked = len(anchors) * flops_forward(config, full)
    return CostReport(target=target, anchors=tuple(anchors),
                      step=measure_step(config, dataset=dataset, steps=steps),
                      flop_ratio=masked / unmasked)
