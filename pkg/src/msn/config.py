"""Flat-file run configuration: one dataclass covering the encoder, loss,
schedules, masking, and data settings, serialized as `key = value` lines."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .data import AugmentPolicy
from .ema import EmaSchedule
from .encoder import EncoderConfig
from .masking import MaskSpec, parse_mask_specs
from .objective import LossConfig
from .optim import ScheduleConfig
from .tensor import ParameterError


class ConfigError(ValueError):
    """Malformed config text or unknown key."""


@dataclass
class TrainConfig:
    # run
    seed: int = 0
    steps: int = 3000
    batch_size: int = 64
    # data
    dataset: str = "synth"          # "synth" or "cifar10"
    data_path: str = ""             # cifar10 binary batch file(s), ':'-separated
    classes: int = 8
    per_class: int = 500
    image_size: int = 32
    # encoder
    patch_size: int = 4
    channels: int = 3
    depth: int = 3
    hidden_dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    head_hidden_dim: int = 0        # 0 derives it from hidden_dim
    head_output_dim: int = 32
    # objective
    prototypes: int = 64
    tau_anchor: float = 0.1
    tau_target: float = 0.025
    me_max_weight: float = 1.0
    sinkhorn_enabled: bool = True
    sinkhorn_iters: int = 3
    # views and masking
    n_anchors: int = 3
    masks: str = "random:0.7,focal,focal"
    anchor_mode: str = "independent"
    crop_scale_min: float = 0.3
    # schedules
    lr_start: float = 0.0002
    lr_peak: float = 0.001
    lr_final: float = 1e-6
    warmup_steps: int = 300
    wd_start: float = 0.04
    wd_end: float = 0.4
    ema_start: float = 0.996
    ema_end: float = 1.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.n_anchors < 1:
            raise ParameterError(f"n_anchors must be >= 1, got {self.n_anchors}")
        if self.steps < 0:
            raise ParameterError(f"steps must be >= 0, got {self.steps}")
        if self.dataset not in ("synth", "cifar10"):
            raise ParameterError(f"unknown dataset {self.dataset!r}")
        if len(self.mask_specs()) != self.n_anchors:
            raise ParameterError(
                f"masks lists {len(self.mask_specs())} specs for "
                f"{self.n_anchors} anchor views")
        self.encoder_config()   # surfaces divisibility errors early
        self.schedule_config()  # and bad warmup/total combinations

    # -- component views -------------------------------------------------

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            image_size=self.image_size, patch_size=self.patch_size,
            channels=self.channels, depth=self.depth,
            hidden_dim=self.hidden_dim, heads=self.heads,
            mlp_ratio=self.mlp_ratio,
            head_hidden_dim=self.head_hidden_dim or None,
            head_output_dim=self.head_output_dim)

    def loss_config(self) -> LossConfig:
        return LossConfig(tau_anchor=self.tau_anchor,
                          tau_target=self.tau_target,
                          lam=self.me_max_weight,
                          sinkhorn_enabled=self.sinkhorn_enabled,
                          sinkhorn_iters=self.sinkhorn_iters)

    def ema_schedule(self) -> EmaSchedule:
        return EmaSchedule(self.ema_start, self.ema_end, max(1, self.steps))

    def schedule_config(self) -> ScheduleConfig:
        return ScheduleConfig(lr_start=self.lr_start, lr_peak=self.lr_peak,
                              lr_final=self.lr_final,
                              warmup_steps=self.warmup_steps,
                              total_steps=max(1, self.steps),
                              wd_start=self.wd_start, wd_end=self.wd_end)

    def mask_specs(self) -> list[MaskSpec]:
        return parse_mask_specs(self.masks)

    def augment_policy(self) -> AugmentPolicy:
        return AugmentPolicy(n_anchors=self.n_anchors,
                             anchor_mode=self.anchor_mode,
                             crop_scale_min=self.crop_scale_min)


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELDS[name].type
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{name} expects a boolean, got {raw!r}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name} expects {kind}, got {raw!r}") from None
    return raw


def parse_config(text: str) -> TrainConfig:
    """`key = value` per line; '#' starts a comment; unknown or repeated keys
    are errors so typos cannot silently fall back to defaults."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, _, raw = body.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, raw)
    return TrainConfig(**values)


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(TrainConfig):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def load_config(path: str) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def desk_preset() -> TrainConfig:
    """Default run: synthetic 8-class corpus, small ViT, a random-masked view
    plus two focal views."""
    return TrainConfig()


def full_scale_preset() -> TrainConfig:
    """Full-scale recipe for real hardware: 224px inputs through a ViT-B/16
    trunk, 1024 prototypes, batch 1024, one random-masked anchor plus ten
    focal views."""
    return TrainConfig(
        dataset="cifar10", classes=10, per_class=0,
        image_size=224, patch_size=16, depth=12, hidden_dim=768, heads=12,
        head_hidden_dim=2048, head_output_dim=256, prototypes=1024,
        batch_size=1024, steps=100_000, warmup_steps=15_000,
        n_anchors=11, masks="random:0.7," + ",".join(["focal"] * 10),
        lr_peak=0.001)


PRESETS = {"desk": desk_preset, "full": full_scale_preset}