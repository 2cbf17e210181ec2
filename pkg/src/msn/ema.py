"""Exponential-moving-average target encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import ParameterSet
from .tensor import ParameterError


@dataclass(frozen=True)
class EmaSchedule:
    m_start: float = 0.996
    m_end: float = 1.0
    total_steps: int = 1

    def __post_init__(self):
        if not 0.0 < self.m_start <= self.m_end <= 1.0:
            raise ParameterError(
                f"need 0 < m_start <= m_end <= 1, got {self.m_start}, {self.m_end}")


def momentum_at(step: int, schedule: EmaSchedule) -> float:
    """Linear ramp from m_start to m_end; clamps past total_steps."""
    frac = min(max(step, 0) / schedule.total_steps, 1.0)
    return schedule.m_start + (schedule.m_end - schedule.m_start) * frac


def ema_update(target: ParameterSet, anchor: ParameterSet, m: float) -> None:
    """In place: target <- m * target + (1 - m) * anchor; buffers mirror the
    anchor's.  No gradient edges are created (raw array arithmetic)."""
    t_names, a_names = set(target.tensors), set(anchor.tensors)
    if t_names != a_names:
        raise ParameterError(
            f"parameter name sets differ: only-target={sorted(t_names - a_names)} "
            f"only-anchor={sorted(a_names - t_names)}")
    for name, src in anchor.tensors.items():
        dst = target.tensors[name].data
        dst *= m
        dst += (1.0 - m) * src.data
    for name, src in anchor.buffers.items():
        np.copyto(target.buffers[name], src)


def make_target(anchor: ParameterSet) -> ParameterSet:
    """Exact detached copy of the anchor parameters to seed the average."""
    tgt = anchor.copy()
    for t in tgt.tensors.values():
        t.requires_grad = False
    return tgt
