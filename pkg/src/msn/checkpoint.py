"""Binary run snapshots: anchor/target parameters, prototypes, optimizer
moments, and counters, written so a resumed run replays bit-exactly."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .config import TrainConfig, dump_config, parse_config
from .encoder import ParameterSet
from .objective import Prototypes
from .optim import OptimState
from .tensor import Tensor

MAGIC = b"MSNCKPT1"
VERSION = 1


class CheckpointMagicError(ValueError):
    """File does not start with the expected magic bytes."""


class CheckpointVersionError(ValueError):
    """File written by an incompatible format version."""


class CheckpointTruncationError(ValueError):
    """File ends mid-record."""


@dataclass
class Checkpoint:
    config: TrainConfig
    anchor: ParameterSet
    target: ParameterSet
    prototypes: Prototypes
    optim: OptimState
    step: int
    rng_seed: int
    rng_counter: int


def _u64_as_f64(value: int) -> np.ndarray:
    # counters and seeds ride in the float64 payload lane bit-for-bit
    return np.array([value], dtype="<u8").view("<f8")


def _f64_as_u64(arr: np.ndarray) -> int:
    return int(arr.astype("<f8", copy=False).view("<u8")[0])


def _records(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out: list[tuple[str, np.ndarray]] = []
    for prefix, ps in (("anchor", ckpt.anchor), ("target", ckpt.target)):
        for name, p in ps.tensors.items():
            out.append((f"{prefix}/{name}", p.data))
        for name, b in ps.buffers.items():
            out.append((f"{prefix}_buf/{name}", b))
    out.append(("prototypes", ckpt.prototypes.q.data))
    for name, m in ckpt.optim.m.items():
        out.append((f"optim_m/{name}", m))
    for name, v in ckpt.optim.v.items():
        out.append((f"optim_v/{name}", v))
    out.append(("meta/step", _u64_as_f64(ckpt.step)))
    out.append(("meta/optim_t", _u64_as_f64(ckpt.optim.t)))
    out.append(("meta/rng_seed", _u64_as_f64(ckpt.rng_seed)))
    out.append(("meta/rng_counter", _u64_as_f64(ckpt.rng_counter)))
    return out


def serialize(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg = dump_config(ckpt.config).encode("utf-8")
    parts.append(struct.pack("<I", len(cfg)))
    parts.append(cfg)
    for name, arr in _records(ckpt):
        nm = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<I", len(nm)))
        parts.append(nm)
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointTruncationError(
                f"needed {n} bytes at offset {self.off}, file has "
                f"{len(self.blob)}")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def done(self) -> bool:
        return self.off == len(self.blob)


def _read_records(blob: bytes) -> tuple[TrainConfig, dict[str, np.ndarray]]:
    r = _Reader(blob)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointMagicError(
            f"bad magic {blob[:8]!r}, expected {MAGIC!r}")
    version = r.u32()
    if version != VERSION:
        raise CheckpointVersionError(
            f"file is format version {version}, this build reads {VERSION}")
    config = parse_config(r.take(r.u32()).decode("utf-8"))
    records: dict[str, np.ndarray] = {}
    while not r.done():
        name = r.take(r.u32()).decode("utf-8")
        rank = struct.unpack("<B", r.take(1))[0]
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape)
        records[name] = data.copy()
    return config, records


def deserialize(blob: bytes) -> Checkpoint:
    config, rec = _read_records(blob)

    def param_set(prefix: str, trainable: bool) -> ParameterSet:
        tensors = {k[len(prefix) + 1:]: Tensor(v, requires_grad=trainable)
                   for k, v in rec.items() if k.startswith(prefix + "/")}
        buffers = {k[len(prefix) + 5:]: v for k, v in rec.items()
                   if k.startswith(prefix + "_buf/")}
        return ParameterSet(tensors=tensors, buffers=buffers)

    optim = OptimState(
        m={k[8:]: v for k, v in rec.items() if k.startswith("optim_m/")},
        v={k[8:]: v for k, v in rec.items() if k.startswith("optim_v/")},
        t=_f64_as_u64(rec["meta/optim_t"]))
    return Checkpoint(
        config=config,
        anchor=param_set("anchor", trainable=True),
        target=param_set("target", trainable=False),
        prototypes=Prototypes(Tensor(rec["prototypes"], requires_grad=True)),
        optim=optim,
        step=_f64_as_u64(rec["meta/step"]),
        rng_seed=_f64_as_u64(rec["meta/rng_seed"]),
        rng_counter=_f64_as_u64(rec["meta/rng_counter"]))


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    blob = serialize(ckpt)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        return deserialize(fh.read())