"""AdamW with decoupled decay plus the warmup/cosine schedules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ParameterError, Tensor

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8

# Decay acts on weight matrices only; 1-D parameters (biases, norm gains,
# the CLS token) and the two name-listed tables are left undecayed.
NO_DECAY_NAMES = ("pos_embed", "prototypes")


@dataclass(frozen=True)
class ScheduleConfig:
    lr_start: float = 0.0002
    lr_peak: float = 0.001
    lr_final: float = 1e-6
    warmup_steps: int = 10
    total_steps: int = 100
    wd_start: float = 0.04
    wd_end: float = 0.4

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ParameterError(
                f"need 0 <= warmup_steps < total_steps, got "
                f"{self.warmup_steps} / {self.total_steps}")


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """Linear warmup to the peak, then half-cosine down to lr_final."""
    if step < cfg.warmup_steps:
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    progress = min(progress, 1.0)
    return cfg.lr_final + 0.5 * (cfg.lr_peak - cfg.lr_final) * (
        1.0 + np.cos(np.pi * progress))


def wd_at(step: int, cfg: ScheduleConfig) -> float:
    """Half-cosine increase from wd_start to wd_end over the whole run."""
    progress = min(max(step, 0) / cfg.total_steps, 1.0)
    return cfg.wd_start + (cfg.wd_end - cfg.wd_start) * 0.5 * (
        1.0 - np.cos(np.pi * progress))


def decays(name: str, param: Tensor) -> bool:
    return param.ndim >= 2 and not any(name.endswith(tag) for tag in NO_DECAY_NAMES)


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "OptimState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


def adamw_step(params: dict[str, Tensor], state: OptimState,
               lr: float, wd: float) -> None:
    """One bias-corrected moment update over every parameter, in place."""
    missing = [k for k, p in params.items() if p.grad is None]
    if missing:
        raise ParameterError(f"parameters missing gradients: {missing[:6]}")
    state.t += 1
    bc1 = 1.0 - BETA1 ** state.t
    bc2 = 1.0 - BETA2 ** state.t
    for name, p in params.items():
        g = p.grad
        m, v = state.m[name], state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        if wd and decays(name, p):
            p.data -= lr * wd * p.data
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + EPS)
