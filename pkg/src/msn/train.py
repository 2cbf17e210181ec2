"""Training loop: batched anchor/target views, masked anchor encoding, the
prototype objective, AdamW on the anchor, and the averaged target encoder.

All randomness is drawn through counter-keyed streams of the run seed, so a
checkpoint restart replays the remaining steps bit-exactly.
"""

from __future__ import annotations

import json
import os
import time

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, save_checkpoint
from .config import TrainConfig
from .data import ImageRecord, augment, load_cifar10, synth_dataset
from .ema import ema_update, make_target, momentum_at
from .encoder import NumericError, encode_batch, init_params, patchify, project, trunk_batch, embed_batch
from .masking import apply_mask, draw_mask
from .objective import init_prototypes, msn_loss, predict_batch, sharpen_targets
from .optim import OptimState, adamw_step, lr_at, wd_at
from .tensor import ParameterError

LOG_EPS = 1e-12
DATA_SEED = 104729  # corpus identity is part of the config, not the run seed


def build_dataset(config: TrainConfig) -> list[ImageRecord]:
    if config.dataset == "synth":
        return synth_dataset(config.classes, config.per_class,
                             config.image_size, T.Rng(DATA_SEED))
    records = []
    for path in filter(None, config.data_path.split(":")):
        records.extend(load_cifar10(path))
    if not records:
        raise ParameterError("cifar10 dataset needs data_path")
    return records


def init_run(config: TrainConfig) -> Checkpoint:
    rng = T.Rng(config.seed)
    anchor = init_params(config.encoder_config(), rng)
    prototypes = init_prototypes(config.prototypes, config.head_output_dim, rng)
    optim = OptimState.for_params({**anchor.tensors, "prototypes": prototypes.q})
    return Checkpoint(config=config, anchor=anchor, target=make_target(anchor),
                      prototypes=prototypes, optim=optim, step=0,
                      rng_seed=config.seed, rng_counter=0)


def _entropy_rows(p: np.ndarray) -> np.ndarray:
    return -(p * np.log(p + LOG_EPS)).sum(axis=1)


def train_step(state: Checkpoint, dataset: list[ImageRecord]) -> dict:
    """One optimization step; mutates parameters, moments, and counters."""
    config = state.config
    t0 = time.monotonic()
    enc = config.encoder_config()
    loss_cfg = config.loss_config()
    policy = config.augment_policy()
    specs = config.mask_specs()
    sched = config.schedule_config()
    step = state.step
    root = T.Rng(state.rng_seed)

    idx = root.child("batch", step).choice_without_replacement(
        len(dataset), config.batch_size)
    views = [augment(dataset[int(i)], root.child("aug", step, int(i)), policy)
             for i in idx]

    # unmasked targets through the averaged encoder, no graph
    target_seqs = [patchify(t, enc.patch_size) for t, _ in views]
    _, target_proj = encode_batch(target_seqs, state.target, enc, mode="eval")
    targets = sharpen_targets(target_proj, state.prototypes, loss_cfg)

    # anchors: mask, then batch trunk calls by sequence length
    masked = []
    for m, spec in enumerate(specs):
        mrng = root.child("mask", step, m)  # one stream per slot, drawn in batch order
        slot = []
        for _, anchors in views:
            seq = patchify(anchors[m], enc.patch_size)
            mk = draw_mask(spec, enc.grid, enc.grid, mrng)
            slot.append(apply_mask(seq, mk))
        masked.append(slot)

    order = sorted(range(len(specs)), key=lambda m: (len(masked[m][0].positions), m))
    vec_by_slot: dict[int, T.Tensor] = {}
    g = 0
    while g < len(order):
        run = [order[g]]
        length = len(masked[order[g]][0].positions)
        while (g + len(run) < len(order)
               and len(masked[order[g + len(run)]][0].positions) == length):
            run.append(order[g + len(run)])
        seqs = [s for m in run for s in masked[m]]
        vecs = trunk_batch(embed_batch(seqs, state.anchor, enc), state.anchor, enc)
        for j, m in enumerate(run):
            vec_by_slot[m] = T.narrow(vecs, 0, j * config.batch_size,
                                      config.batch_size)
        g += len(run)

    anchor_vecs = T.concat([vec_by_slot[m] for m in range(len(specs))], axis=0)
    anchor_proj = project(anchor_vecs, state.anchor, enc, mode="train")
    preds = predict_batch(anchor_proj, state.prototypes, loss_cfg.tau_anchor)
    loss, ce, ent = msn_loss(preds, targets, loss_cfg)

    loss_val = loss.item()
    metrics = {
        "step": step,
        "loss": loss_val,
        "ce": ce.item(),
        "memax": ent.item(),
        "target_entropy": float(_entropy_rows(targets.data).mean()),
        "anchor_entropy": float(_entropy_rows(preds.data).mean()),
        "pbar_min": float(preds.data.mean(axis=0).min()),
        "lr": lr_at(step, sched),
        "wd": wd_at(step, sched),
        "momentum": momentum_at(step, state.config.ema_schedule()),
    }
    if not np.isfinite(loss_val):
        raise NumericError(f"non-finite loss {loss_val} at step {step}")

    loss.backward()
    trainable = {**state.anchor.tensors, "prototypes": state.prototypes.q}
    adamw_step(trainable, state.optim, metrics["lr"], metrics["wd"])
    for p in trainable.values():
        p.zero_grad()
    ema_update(state.target, state.anchor, metrics["momentum"])

    leaked = [k for k, p in state.target.tensors.items() if p.grad is not None]
    if leaked:
        raise ParameterError(f"target parameters received gradients: {leaked[:4]}")

    state.step = step + 1
    metrics["wallclock_ms"] = (time.monotonic() - t0) * 1000.0
    return metrics


def train(config: TrainConfig, out_dir: str | None = None,
          resume: Checkpoint | None = None, stop_after: int | None = None,
          log=None, dataset: list[ImageRecord] | None = None) -> Checkpoint:
    """Run (or continue) a training run up to config.steps.

    Writes one structured metrics record per step; `stop_after` caps the step
    counter early so restarts can be exercised.  On a non-finite loss the last
    finite state is checkpointed before the error propagates.  A prebuilt
    `dataset` skips corpus construction when many runs share one.
    """
    if dataset is None:
        dataset = build_dataset(config)
    if config.batch_size > len(dataset):
        raise ParameterError(
            f"batch_size {config.batch_size} exceeds dataset size {len(dataset)}")
    state = resume if resume is not None else init_run(config)
    if resume is not None and resume.config != config:
        raise ParameterError("resumed checkpoint was written by a different config")
    end = config.steps if stop_after is None else min(config.steps, stop_after)

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.jsonl") if out_dir else None
    sink = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
    try:
        while state.step < end:
            try:
                rec = train_step(state, dataset)
            except NumericError:
                if out_dir:
                    save_checkpoint(os.path.join(out_dir, "abort.ckpt"), state)
                raise
            if sink is not None:
                sink.write(json.dumps(rec) + "\n")
                sink.flush()
            if log is not None:
                log(rec)
    finally:
        if sink is not None:
            sink.close()
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "checkpoint.ckpt"), state)
    return state