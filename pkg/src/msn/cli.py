"""Command-line entry points: train, eval, ablate, profile, inspect-checkpoint.

Thread pinning must happen before numpy first loads, so `main` parses
--threads and sets the BLAS environment up front; everything that imports
numpy is pulled in lazily inside the subcommand handlers.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
               "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS")

# Ablation axes: label plus the config-field overrides each variant applies.
ABLATION_AXES = {
    "masking_strategy": [
        ("no-mask", dict(masks="none", n_anchors=1)),
        ("focal", dict(masks="focal", n_anchors=1)),
        ("random", dict(masks="random:0.5", n_anchors=1)),
        ("random+focal", dict(masks="random:0.5,focal", n_anchors=2)),
    ],
    "masking_ratio": [
        (f"ratio-{r:g}", dict(masks=f"random:{r:g},focal,focal"))
        for r in (0.15, 0.3, 0.5, 0.7)
    ],
    "view_sharing": [
        ("shared", dict(anchor_mode="shared")),
        ("color-jitter", dict(anchor_mode="color_only")),
        ("independent", dict(anchor_mode="independent")),
    ],
    "prototypes": [
        ("half", dict(prototypes=32)),
        ("default", dict(prototypes=64)),
        ("double", dict(prototypes=128)),
    ],
    "sinkhorn": [
        ("sinkhorn-lam1", dict(sinkhorn_enabled=True, me_max_weight=1.0)),
        ("none-lam1", dict(sinkhorn_enabled=False, me_max_weight=1.0)),
        ("none-lam5", dict(sinkhorn_enabled=False, me_max_weight=5.0)),
    ],
}


def ablate(config, axis: str, seeds=(0, 1, 2), shots: int = 13,
           steps: int | None = None, probe_seeds=(0, 1, 2), log=None):
    """Train each variant of one ablation axis and probe its frozen features.

    Returns one row per variant: per-pretraining-seed probe accuracy (each
    itself a mean over probe split seeds), plus their mean and spread.  All
    variants share the pre-training seeds and the evaluation corpus, so rows
    are comparable and reruns are bit-identical.
    """
    import dataclasses

    import numpy as np

    from .probe import lowshot_eval
    from .train import build_dataset, train

    if axis not in ABLATION_AXES:
        raise ValueError(
            f"unknown ablation axis {axis!r}; have {sorted(ABLATION_AXES)}")
    dataset = build_dataset(config)
    rows = []
    for label, overrides in ABLATION_AXES[axis]:
        accs = []
        for seed in seeds:
            cfg = dataclasses.replace(
                config, seed=seed,
                steps=config.steps if steps is None else steps, **overrides)
            state = train(cfg, dataset=dataset)
            report = lowshot_eval(state.target, cfg.encoder_config(), dataset,
                                  shots, list(probe_seeds))
            accs.append(report.mean_top1)
        row = {"axis": axis, "variant": label, "shots": shots,
               "steps": config.steps if steps is None else steps,
               "seeds": list(seeds), "accuracy": accs,
               "mean": float(np.mean(accs)), "std": float(np.std(accs))}
        rows.append(row)
        if log is not None:
            log(row)
    return rows


def _emit(record: dict) -> None:
    sys.stdout.write(json.dumps(record) + "\n")
    sys.stdout.flush()


def _load_config(args):
    from .config import PRESETS, load_config
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = PRESETS[args.preset]()
    if args.seed is not None:
        import dataclasses
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _cmd_train(args) -> int:
    from .checkpoint import load_checkpoint
    from .train import train
    cfg = _load_config(args)
    resume = load_checkpoint(args.resume) if args.resume else None
    state = train(cfg, out_dir=args.out, resume=resume, log=_emit)
    _emit({"event": "done", "step": state.step,
           "checkpoint": os.path.join(args.out, "checkpoint.ckpt")
           if args.out else None})
    return 0


def _cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .probe import lowshot_eval
    from .train import build_dataset
    state = load_checkpoint(args.checkpoint)
    dataset = build_dataset(state.config)
    report = lowshot_eval(state.target, state.config.encoder_config(), dataset,
                          args.shots, list(range(args.probe_seeds)))
    _emit({"checkpoint": args.checkpoint, "step": state.step,
           "shots": report.k, "seeds": report.seeds,
           "per_seed_top1": report.per_seed_top1,
           "mean_top1": report.mean_top1, "std_top1": report.std_top1})
    return 0


def _cmd_ablate(args) -> int:
    cfg = _load_config(args)
    ablate(cfg, args.axis, shots=args.shots, steps=args.steps, log=_emit)
    return 0


def _cmd_profile(args) -> int:
    import dataclasses
    from .profiler import cost_report, masking_sweep
    cfg = _load_config(args)
    if args.per_class:
        cfg = dataclasses.replace(cfg, per_class=args.per_class)
    report = cost_report(cfg, repeats=args.repeats, steps=args.steps)
    _emit({"record": "view", "role": "target",
           **dataclasses.asdict(report.target)})
    for a in report.anchors:
        _emit({"record": "view", "role": "anchor", **dataclasses.asdict(a)})
    _emit({"record": "step", "step_ms": report.step.step_ms,
           "peak_bytes": report.step.peak_bytes,
           "flop_ratio": report.flop_ratio})
    for point in masking_sweep(cfg, args.sweep, repeats=args.repeats):
        _emit({"record": "sweep", **dataclasses.asdict(point)})
    return 0


def _cmd_inspect(args) -> int:
    from .checkpoint import load_checkpoint
    from .config import dump_config
    state = load_checkpoint(args.checkpoint)
    arrays = {f"anchor/{k}": list(p.data.shape)
              for k, p in state.anchor.tensors.items()}
    arrays.update({f"target/{k}": list(p.data.shape)
                   for k, p in state.target.tensors.items()})
    arrays["prototypes"] = list(state.prototypes.q.data.shape)
    _emit({"step": state.step, "optim_t": state.optim.t,
           "rng_seed": state.rng_seed, "rng_counter": state.rng_counter,
           "n_arrays": len(arrays), "arrays": arrays,
           "config": dump_config(state.config).strip().splitlines()})
    return 0


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--preset", default="desk", choices=("desk", "full"),
                   help="built-in config when --config is absent")
    p.add_argument("--seed", type=int, default=None, help="override run seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msn",
        description="Masked-view joint-embedding pre-training at desk scale")
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS thread cap, applied before numpy loads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run or resume pre-training")
    _add_config_flags(p)
    p.add_argument("--out", help="directory for metrics.jsonl and checkpoints")
    p.add_argument("--resume", help="checkpoint file to continue from")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="low-shot probe of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--shots", type=int, default=13, help="labels per class")
    p.add_argument("--probe-seeds", type=int, default=3,
                   help="number of probe split seeds")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("ablate", help="train and probe one ablation axis")
    _add_config_flags(p)
    p.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    p.add_argument("--shots", type=int, default=13)
    p.add_argument("--steps", type=int, default=None,
                   help="override steps per variant run")
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("profile", help="FLOP and wall-time cost report")
    _add_config_flags(p)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--steps", type=int, default=5,
                   help="measured optimization steps")
    p.add_argument("--per-class", type=int, default=32, dest="per_class",
                   help="corpus size for the measured steps")
    p.add_argument("--sweep", type=float, nargs="+",
                   default=[0.0, 0.15, 0.3, 0.5, 0.7, 0.9],
                   help="masking ratios for the cost sweep")
    p.set_defaults(fn=_cmd_profile)

    p = sub.add_parser("inspect-checkpoint", help="describe a checkpoint file")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=_cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for var in THREAD_VARS:
        os.environ[var] = str(args.threads)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
