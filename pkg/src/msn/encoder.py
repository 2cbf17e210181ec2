"""Vision transformer over variable-length patch sequences.

The trunk runs pre-norm blocks (LN, multi-head self-attention, residual;
LN, gelu MLP, residual) over a prepended CLS token plus the surviving patch
tokens, and reads out the CLS row after a final LN.  Positional embeddings
are a single learned table over the full grid, gathered by each token's
original position, so dropping patches never shifts the embedding a
surviving patch receives.

The projection head is three linear layers with batch norm and gelu in
front of the first two.  Batch norm needs real batch statistics in train
mode, so the head runs over stacked CLS vectors via ``project``; the
single-sequence ``encode`` therefore only supports eval mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ParameterError, ShapeError, Tensor


class NumericError(RuntimeError):
    """Non-finite values appeared where the math promises finite ones."""


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    depth: int = 3
    hidden_dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    head_hidden_dim: int | None = None
    head_output_dim: int = 256

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ParameterError(
                f"image_size {self.image_size} not divisible by patch_size "
                f"{self.patch_size}")
        if self.hidden_dim % self.heads != 0:
            raise ParameterError(
                f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def token_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size

    @property
    def mlp_hidden(self) -> int:
        return int(self.mlp_ratio * self.hidden_dim)

    @property
    def head_width(self) -> int:
        return self.head_hidden_dim if self.head_hidden_dim is not None else self.hidden_dim


@dataclass
class PatchSequence:
    tokens: Tensor          # [S, token_dim]
    positions: np.ndarray   # [S] int grid indices, row-major

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64)
        if self.positions.ndim != 1 or self.positions.shape[0] != self.tokens.shape[0]:
            raise ShapeError(
                f"positions {self.positions.shape} do not match tokens "
                f"{self.tokens.shape}")
        if self.tokens.shape[0] < 1:
            raise ShapeError("patch sequence must keep at least one token")
        if len(np.unique(self.positions)) != len(self.positions):
            raise ShapeError("duplicate grid positions in patch sequence")


@dataclass
class Representation:
    vector: Tensor       # [hidden_dim], trunk CLS output
    projected: Tensor    # [head_output_dim]


@dataclass
class ParameterSet:
    """Trainable tensors plus batch-norm running buffers, both name-keyed."""
    tensors: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def names(self) -> list[str]:
        return list(self.tensors)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            tensors={k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                     for k, v in self.tensors.items()},
            buffers={k: v.copy() for k, v in self.buffers.items()})


# ---------------------------------------------------------------------------
# Patchify
# ---------------------------------------------------------------------------


def patchify(image, patch_size: int) -> PatchSequence:
    """Cut a [C, H, W] image into non-overlapping patch tokens, row-major.

    Each token flattens its channels-first C x N x N pixel block.
    """
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeError(f"expected [C, H, W] image, got shape {arr.shape}")
    c, h, w = arr.shape
    n = patch_size
    if h % n != 0 or w % n != 0:
        raise ShapeError(f"image {h}x{w} not divisible into {n}x{n} patches")
    gh, gw = h // n, w // n
    tokens = (arr.reshape(c, gh, n, gw, n)
                 .transpose(1, 3, 0, 2, 4)
                 .reshape(gh * gw, c * n * n))
    return PatchSequence(Tensor(tokens.copy()), np.arange(gh * gw))


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def _param_specs(cfg: EncoderConfig) -> list[tuple[str, tuple, str]]:
    d, td = cfg.hidden_dim, cfg.token_dim
    mh, hw, out = cfg.mlp_hidden, cfg.head_width, cfg.head_output_dim
    specs = [
        ("patch_embed.weight", (td, d), "trunc"),
        ("patch_embed.bias", (d,), "zero"),
        ("pos_embed", (cfg.n_patches, d), "normal"),
        ("cls", (d,), "zero"),
    ]
    for i in range(cfg.depth):
        b = f"block{i}"
        specs += [
            (f"{b}.ln1.gain", (d,), "one"),
            (f"{b}.ln1.bias", (d,), "zero"),
            (f"{b}.attn.wq", (d, d), "trunc"),
            (f"{b}.attn.bq", (d,), "zero"),
            (f"{b}.attn.wk", (d, d), "trunc"),
            (f"{b}.attn.wv", (d, d), "trunc"),
            (f"{b}.attn.bv", (d,), "zero"),
            (f"{b}.attn.wo", (d, d), "trunc"),
            (f"{b}.attn.bo", (d,), "zero"),
            (f"{b}.ln2.gain", (d,), "one"),
            (f"{b}.ln2.bias", (d,), "zero"),
            (f"{b}.mlp.w1", (d, mh), "trunc"),
            (f"{b}.mlp.b1", (mh,), "zero"),
            (f"{b}.mlp.w2", (mh, d), "trunc"),
            (f"{b}.mlp.b2", (d,), "zero"),
        ]
    specs += [
        ("head.bn1.gain", (d,), "one"),
        ("head.bn1.bias", (d,), "zero"),
        ("head.fc1.weight", (d, hw), "trunc"),
        ("head.fc1.bias", (hw,), "zero"),
        ("head.bn2.gain", (hw,), "one"),
        ("head.bn2.bias", (hw,), "zero"),
        ("head.fc2.weight", (hw, hw), "trunc"),
        ("head.fc2.bias", (hw,), "zero"),
        ("head.fc3.weight", (hw, out), "trunc"),
        ("head.fc3.bias", (out,), "zero"),
    ]
    return specs


INIT_STD = 0.02


def init_params(cfg: EncoderConfig, rng: T.Rng) -> ParameterSet:
    """Truncated-normal weights (std 0.02), zero biases and CLS, normal
    positional table, unit norm gains; each draw keyed by parameter name."""
    ps = ParameterSet()
    for name, shape, kind in _param_specs(cfg):
        if kind == "trunc":
            data = rng.child("init", name).truncated_normal(shape, std=INIT_STD)
        elif kind == "normal":
            data = rng.child("init", name).normal(shape, std=INIT_STD)
        elif kind == "one":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        ps.tensors[name] = Tensor(data, requires_grad=True)
    ps.buffers["head.bn1.running_mean"] = np.zeros(cfg.hidden_dim)
    ps.buffers["head.bn1.running_var"] = np.ones(cfg.hidden_dim)
    ps.buffers["head.bn2.running_mean"] = np.zeros(cfg.head_width)
    ps.buffers["head.bn2.running_var"] = np.ones(cfg.head_width)
    return ps


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def embed(seq: PatchSequence, params: ParameterSet, cfg: EncoderConfig) -> Tensor:
    """[S, token_dim] tokens -> [S+1, hidden_dim] rows; row 0 is the CLS slot."""
    out = embed_batch([seq], params, cfg)
    return out.reshape(seq.tokens.shape[0] + 1, cfg.hidden_dim)


def embed_batch(seqs: list[PatchSequence], params: ParameterSet,
                cfg: EncoderConfig) -> Tensor:
    """Stack same-length sequences into [B, S+1, hidden_dim] embedded rows."""
    t = params.tensors
    lengths = {s.tokens.shape[0] for s in seqs}
    if len(lengths) != 1:
        raise ShapeError(f"batched embed needs equal sequence lengths, got {sorted(lengths)}")
    positions = np.stack([s.positions for s in seqs])
    if positions.size and (positions.min() < 0 or positions.max() >= cfg.n_patches):
        raise ShapeError(
            f"patch position outside the {cfg.grid}x{cfg.grid} grid")
    tokens = T.concat([s.tokens.reshape(1, *s.tokens.shape) for s in seqs], axis=0)
    x = T.affine(tokens, t["patch_embed.weight"], t["patch_embed.bias"])
    x = T.add(x, T.gather_rows(t["pos_embed"], positions))
    cls_rows = T.repeat_rows(t["cls"], len(seqs))
    return T.concat([cls_rows, x], axis=1)


def _zero_bias(d: int) -> Tensor:
    """Constant stand-in where a bias parameter could never learn: key bias
    shifts every score of a query equally (softmax removes it), and the head's
    input batch norm subtracts any shift of the trunk output with the batch
    mean.  Leaving such parameters in makes their finite-difference checks
    measure pure roundoff, so they are dropped from the inventory instead."""
    return Tensor(np.zeros(d))


def _unit_gain(d: int) -> Tensor:
    """The final norm keeps no gain either: the head's batch norm divides out
    per-feature scale, so the only surviving gradient is the batch-norm
    epsilon leak (~1e-7), which Adam's moment normalization would amplify
    into pure drift."""
    return Tensor(np.ones(d))


def _attention(x: Tensor, t: dict, prefix: str, cfg: EncoderConfig) -> Tensor:
    b, s1, d = x.shape
    nh, dh = cfg.heads, cfg.hidden_dim // cfg.heads

    def split(y):
        return y.reshape(b, s1, nh, dh).transpose(0, 2, 1, 3)

    q = split(T.affine(x, t[f"{prefix}.wq"], t[f"{prefix}.bq"]))
    k = split(T.affine(x, t[f"{prefix}.wk"], _zero_bias(d)))
    v = split(T.affine(x, t[f"{prefix}.wv"], t[f"{prefix}.bv"]))
    scores = T.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / np.sqrt(dh))
    attn = T.softmax(scores)
    mixed = (attn @ v).transpose(0, 2, 1, 3).reshape(b, s1, d)
    return T.affine(mixed, t[f"{prefix}.wo"], t[f"{prefix}.bo"])


def trunk_batch(x: Tensor, params: ParameterSet, cfg: EncoderConfig) -> Tensor:
    """[B, S+1, d] embedded rows -> [B, d] CLS vectors after the final LN."""
    t = params.tensors
    for i in range(cfg.depth):
        b = f"block{i}"
        h = T.layer_norm(x, t[f"{b}.ln1.gain"], t[f"{b}.ln1.bias"])
        x = T.add(x, _attention(h, t, f"{b}.attn", cfg))
        h = T.layer_norm(x, t[f"{b}.ln2.gain"], t[f"{b}.ln2.bias"])
        h = T.affine(T.gelu(T.affine(h, t[f"{b}.mlp.w1"], t[f"{b}.mlp.b1"])),
                     t[f"{b}.mlp.w2"], t[f"{b}.mlp.b2"])
        x = T.add(x, h)
    x = T.layer_norm(x, _unit_gain(cfg.hidden_dim), _zero_bias(cfg.hidden_dim))
    bsz = x.shape[0]
    return T.narrow(x, 1, 0, 1).reshape(bsz, cfg.hidden_dim)


def project(vectors: Tensor, params: ParameterSet, cfg: EncoderConfig,
            mode: str) -> Tensor:
    """Head over [B, hidden_dim] CLS vectors -> [B, head_output_dim]."""
    t, buf = params.tensors, params.buffers
    x = T.batch_norm_1d(vectors, t["head.bn1.gain"], t["head.bn1.bias"],
                        buf["head.bn1.running_mean"], buf["head.bn1.running_var"],
                        mode=mode)
    x = T.gelu(T.affine(x, t["head.fc1.weight"], t["head.fc1.bias"]))
    x = T.batch_norm_1d(x, t["head.bn2.gain"], t["head.bn2.bias"],
                        buf["head.bn2.running_mean"], buf["head.bn2.running_var"],
                        mode=mode)
    x = T.gelu(T.affine(x, t["head.fc2.weight"], t["head.fc2.bias"]))
    return T.affine(x, t["head.fc3.weight"], t["head.fc3.bias"])


def encode_batch(seqs: list[PatchSequence], params: ParameterSet,
                 cfg: EncoderConfig, mode: str) -> tuple[Tensor, Tensor]:
    """Same-length sequences -> ([B, hidden_dim] CLS, [B, out] projected)."""
    vectors = trunk_batch(embed_batch(seqs, params, cfg), params, cfg)
    return vectors, project(vectors, params, cfg, mode)


def encode(seq: PatchSequence, params: ParameterSet, cfg: EncoderConfig,
           mode: str = "eval") -> Representation:
    """Single-sequence forward.  Train mode is refused here because the head's
    batch norm needs at least two rows; route training batches through
    ``encode_batch`` instead."""
    vectors, projected = encode_batch([seq], params, cfg, mode)
    vec = vectors.reshape(cfg.hidden_dim)
    proj = projected.reshape(cfg.head_output_dim)
    if not np.isfinite(vec.data).all() or not np.isfinite(proj.data).all():
        raise NumericError(
            f"non-finite encoder output for sequence of length {seq.tokens.shape[0]}")
    return Representation(vector=vec, projected=proj)
