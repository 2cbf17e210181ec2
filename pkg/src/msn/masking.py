"""Random and focal masks over the patch grid.

A mask is the set of grid positions an anchor view keeps.  Random masks drop
a fixed fraction of positions uniformly without replacement; focal masks keep
one contiguous rectangle and drop everything around it.  Target views are
never masked.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import PatchSequence
from .tensor import ParameterError, ShapeError, Tensor

# Focal blocks default to the side-length fraction of a 96px crop of a 224px
# image, so a 14x14 grid yields the reference 6x6 block (about 18% area).
FOCAL_SIDE_FRACTION = 96.0 / 224.0


@dataclass(frozen=True)
class MaskSpec:
    kind: str                  # "random" | "focal" | "none"
    ratio: float = 0.0         # random only
    block_h: int | None = None  # focal only; None means the default fraction
    block_w: int | None = None

    def __post_init__(self):
        if self.kind not in ("random", "focal", "none"):
            raise ParameterError(f"unknown mask kind {self.kind!r}")
        if self.kind == "random" and not 0.0 <= self.ratio < 1.0:
            raise ParameterError(f"random mask ratio must be in [0, 1), got {self.ratio}")

    def encode(self) -> str:
        if self.kind == "random":
            return f"random:{self.ratio:g}"
        if self.kind == "focal":
            if self.block_h is None:
                return "focal"
            return f"focal:{self.block_h}x{self.block_w}"
        return "none"


def parse_mask_spec(text: str) -> MaskSpec:
    """One spec: 'random:0.7', 'focal', 'focal:3x4', or 'none'."""
    head, _, arg = text.strip().partition(":")
    if head == "random":
        return MaskSpec("random", ratio=float(arg) if arg else 0.0)
    if head == "focal":
        if not arg:
            return MaskSpec("focal")
        bh, _, bw = arg.partition("x")
        return MaskSpec("focal", block_h=int(bh), block_w=int(bw))
    if head == "none":
        return MaskSpec("none")
    raise ParameterError(f"cannot parse mask spec {text!r}")


def parse_mask_specs(text: str) -> list[MaskSpec]:
    """Comma-separated list, e.g. 'random:0.5,focal,focal'."""
    parts = [p for p in text.split(",") if p.strip()]
    if not parts:
        raise ParameterError("mask spec list is empty")
    return [parse_mask_spec(p) for p in parts]


@dataclass(frozen=True)
class Mask:
    keep_positions: np.ndarray  # sorted unique grid indices

    def __post_init__(self):
        pos = np.asarray(self.keep_positions, dtype=np.int64)
        object.__setattr__(self, "keep_positions", pos)
        if pos.size == 0:
            raise ParameterError("mask keeps no positions")
        if not np.array_equal(pos, np.unique(pos)):
            raise ParameterError("mask positions must be sorted and unique")


def keep_count(n_positions: int, ratio: float) -> int:
    """Positions kept when dropping floor(ratio * P), never below one."""
    return max(1, n_positions - int(np.floor(ratio * n_positions)))


def random_mask(grid_h: int, grid_w: int, ratio: float, rng: T.Rng) -> Mask:
    if not 0.0 <= ratio < 1.0:
        raise ParameterError(f"mask ratio must be in [0, 1), got {ratio}")
    p = grid_h * grid_w
    keep = keep_count(p, ratio)
    picked = rng.choice_without_replacement(p, keep)
    return Mask(np.sort(picked))


def default_focal_block(grid_h: int, grid_w: int) -> tuple[int, int]:
    bh = max(1, round(grid_h * FOCAL_SIDE_FRACTION))
    bw = max(1, round(grid_w * FOCAL_SIDE_FRACTION))
    return bh, bw


def focal_mask(grid_h: int, grid_w: int, block_h: int, block_w: int,
               rng: T.Rng) -> Mask:
    if not (1 <= block_h <= grid_h and 1 <= block_w <= grid_w):
        raise ParameterError(
            f"focal block {block_h}x{block_w} does not fit grid {grid_h}x{grid_w}")
    r0 = int(rng.integers(0, grid_h - block_h + 1))
    c0 = int(rng.integers(0, grid_w - block_w + 1))
    rows = np.arange(r0, r0 + block_h)
    cols = np.arange(c0, c0 + block_w)
    kept = (rows[:, None] * grid_w + cols[None, :]).reshape(-1)
    return Mask(np.sort(kept))


def draw_mask(spec: MaskSpec, grid_h: int, grid_w: int, rng: T.Rng) -> Mask:
    if spec.kind == "random":
        return random_mask(grid_h, grid_w, spec.ratio, rng)
    if spec.kind == "focal":
        bh, bw = (spec.block_h, spec.block_w) if spec.block_h is not None \
            else default_focal_block(grid_h, grid_w)
        return focal_mask(grid_h, grid_w, bh, bw, rng)
    return Mask(np.arange(grid_h * grid_w))


def apply_mask(seq: PatchSequence, mask: Mask) -> PatchSequence:
    """Sub-sequence at the mask's kept positions, original order preserved."""
    pos_to_row = {int(p): i for i, p in enumerate(seq.positions)}
    missing = [int(p) for p in mask.keep_positions if int(p) not in pos_to_row]
    if missing:
        raise ShapeError(f"mask keeps positions absent from the sequence: {missing[:4]}")
    rows = np.array([pos_to_row[int(p)] for p in mask.keep_positions], dtype=np.int64)
    order = np.argsort(rows)
    rows = rows[order]
    tokens = Tensor(seq.tokens.data[rows].copy())
    return PatchSequence(tokens, seq.positions[rows])
