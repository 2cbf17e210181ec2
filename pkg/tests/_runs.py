"""Cached artifacts for the slow end-to-end runs the acceptance gate consumes.

A full-preset training run takes tens of minutes on one core, so finished
runs live under .runs/ keyed by a hash of the config text plus a cache
version.  Prewarm scripts and tests call the same ensure_* helpers: the
first caller computes and stores, later callers load bit-identical results.
Delete .runs/ (or bump RUNS_VERSION) to force everything fresh.
"""

import dataclasses
import hashlib
import json
import os
import shutil
import time

import numpy as np

from msn.checkpoint import load_checkpoint
from msn.cli import ABLATION_AXES
from msn.config import dump_config
from msn.probe import lowshot_eval, mask_invariance
from msn.train import build_dataset, init_run, train

RUNS_VERSION = 1
RUNS_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)),
                        os.pardir, ".runs")

# Ablation-direction runs use shortened schedules; values frozen after pilot
# calibration (see the step records stored alongside each cached run).
ABLATION_STEPS = 1000
ABLATION_SHOTS = 13


def _key(config, tag=""):
    text = f"cache-v{RUNS_VERSION}\n{tag}\n{dump_config(config)}"
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _dir(config, tag=""):
    return os.path.join(RUNS_DIR, _key(config, tag))


def _cached_json(path, compute):
    if os.path.exists(path):
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    value = compute()
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(value, f, sort_keys=True)
    return value


def ensure_run(config, dataset=None):
    """Return the finished checkpoint for `config`, training it if absent.

    Training goes to a scratch directory that is renamed into place only on
    completion, so an interrupted run never masquerades as a finished one.
    """
    d = _dir(config)
    ckpt = os.path.join(d, "checkpoint.ckpt")
    if not os.path.exists(ckpt):
        tmp = d + ".tmp"
        if os.path.exists(tmp):
            shutil.rmtree(tmp)
        t0 = time.monotonic()
        train(config, out_dir=tmp, dataset=dataset)
        with open(os.path.join(tmp, "config.txt"), "w", encoding="utf-8") as f:
            f.write(dump_config(config))
        with open(os.path.join(tmp, "train_s.json"), "w", encoding="utf-8") as f:
            json.dump(time.monotonic() - t0, f)
        if os.path.exists(d):
            shutil.rmtree(d)
        os.rename(tmp, d)
    return load_checkpoint(ckpt)


def run_metrics(config):
    """Per-step metrics records of a cached (or freshly trained) run."""
    ensure_run(config)
    with open(os.path.join(_dir(config), "metrics.jsonl"), encoding="utf-8") as f:
        return [json.loads(line) for line in f]


def run_train_seconds(config):
    """Wall seconds the cached run's train() call took when it was computed."""
    ensure_run(config)
    with open(os.path.join(_dir(config), "train_s.json"), encoding="utf-8") as f:
        return json.load(f)


def _params_for(config, init, dataset):
    """Target-trunk parameters plus the directory their caches live in."""
    if init:
        return init_run(config).target, _dir(config, "init")
    return ensure_run(config, dataset=dataset).target, _dir(config)


def ensure_probe(config, k, probe_seeds=(0, 1, 2), init=False, dataset=None):
    """Cached low-shot probe of the trained (or freshly initialized) trunk."""
    name = f"probe-k{k}-p{'_'.join(map(str, probe_seeds))}.json"

    def compute():
        ds = build_dataset(config) if dataset is None else dataset
        params, _ = _params_for(config, init, ds)
        report = lowshot_eval(params, config.encoder_config(), ds, k,
                              list(probe_seeds))
        return {"k": report.k, "seeds": report.seeds,
                "per_seed_top1": report.per_seed_top1,
                "mean_top1": report.mean_top1, "std_top1": report.std_top1}

    if init:
        return _cached_json(os.path.join(_dir(config, "init"), name), compute)
    path = os.path.join(_dir(config), name)
    if not os.path.exists(path):
        ensure_run(config, dataset=dataset)  # complete the run dir first
    return _cached_json(path, compute)


def invariance_subset(dataset, n=256):
    """A class-balanced slice: the corpus is stored class-blocked, so a
    strided pick covers every class evenly."""
    return dataset[:: max(1, len(dataset) // n)][:n]


def ensure_invariance(config, ratio, n=256, init=False, dataset=None):
    """Cached masked-vs-unmasked feature cosine for the target trunk."""
    name = f"invariance-r{ratio:g}-n{n}.json"

    def compute():
        ds = build_dataset(config) if dataset is None else dataset
        params, _ = _params_for(config, init, ds)
        return mask_invariance(params, config.encoder_config(),
                               invariance_subset(ds, n), ratio)

    if init:
        return _cached_json(os.path.join(_dir(config, "init"), name), compute)
    path = os.path.join(_dir(config), name)
    if not os.path.exists(path):
        ensure_run(config, dataset=dataset)
    return _cached_json(path, compute)


def ensure_ablation(config, axis, seeds=(0, 1, 2), shots=ABLATION_SHOTS,
                    steps=ABLATION_STEPS, probe_seeds=(0, 1, 2), dataset=None):
    """One row per axis variant, served from per-run caches.

    Mirrors the CLI ablation table but routes every training and probe
    through the cache, so partial progress survives interruption and reruns
    are free.
    """
    if dataset is None:
        dataset = build_dataset(config)
    rows = []
    for label, overrides in ABLATION_AXES[axis]:
        accs = []
        for seed in seeds:
            cfg = dataclasses.replace(
                config, seed=seed,
                steps=config.steps if steps is None else steps, **overrides)
            report = ensure_probe(cfg, shots, probe_seeds, dataset=dataset)
            accs.append(report["mean_top1"])
        rows.append({"axis": axis, "variant": label, "shots": shots,
                     "steps": config.steps if steps is None else steps,
                     "seeds": list(seeds), "accuracy": accs,
                     "mean": float(np.mean(accs)), "std": float(np.std(accs))})
    return rows
