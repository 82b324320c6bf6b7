"""Nested run configuration with strict loading and a canonical hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import InvalidConfig

ENCODERS = ("mamba", "attention", "gru")
SCAN_DIMS = ("depth+temporal", "depth-only-off", "temporal-only-off")
MODES = ("mutual", "independent")


@dataclass
class WorldConfig:
    grid_dims: list = field(default_factory=lambda: [16, 8, 16])
    voxel_size: float = 0.5
    image_size: list = field(default_factory=lambda: [32, 48])
    frames: int = 4
    density: str | None = None
    focal: float = 40.0
    camera_height: float = 3.0
    camera_pitch: float = 20.0
    trajectory_step: float = 0.5
    num_classes: int = 4


@dataclass
class ScheduleConfig:
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class PerceptionConfig:
    channels: int = 16
    lift_channels: int = 8
    zero_init_head: bool = True
    lambda_ce: float = 1.0
    lambda_sem: float = 1.0
    lambda_geo: float = 1.0
    class_weight_min: float = 0.1
    class_weight_max: float = 10.0


@dataclass
class MdaConfig:
    enabled: bool = True
    patch_size: int = 4
    model_dim: int = 16
    state_dim: int = 4
    occ_channels: int = 8
    encoder: str = "mamba"
    scan: str = "depth+temporal"
    selective: bool = True
    sample_points: int = 8
    chunk: int = 0


@dataclass
class DenoiserConfig:
    widths: list = field(default_factory=lambda: [16, 32, 64])
    time_dim: int = 64
    token_dim: int = 32
    groups: int = 8


@dataclass
class TrainConfig:
    pretrain_epochs: int = 4
    stage1_epochs: int = 4
    stage2_epochs: int = 8
    batch_size: int = 8
    lr_perception: float = 1e-3
    lr_denoiser: float = 2e-4
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    mode: str = "mutual"
    perception_input: str = "noisy"
    train_frames: str = "all"
    seed: int = 0


@dataclass
class SampleConfig:
    steps: int = 50


@dataclass
class EvalConfig:
    feature_dim: int = 16
    n_generated: int = 32
    seed: int = 1234


@dataclass
class DataConfig:
    train_count: int = 64
    val_count: int = 32
    seed: int = 0


@dataclass
class Config:
    world: WorldConfig = field(default_factory=WorldConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    perception: PerceptionConfig = field(default_factory=PerceptionConfig)
    mda: MdaConfig = field(default_factory=MdaConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def validate(self) -> "Config":
        if self.mda.encoder not in ENCODERS:
            raise InvalidConfig(f"mda.encoder must be one of {ENCODERS}")
        if self.mda.scan not in SCAN_DIMS:
            raise InvalidConfig(f"mda.scan must be one of {SCAN_DIMS}")
        if self.train.mode not in MODES:
            raise InvalidConfig(f"train.mode must be one of {MODES}")
        if self.train.perception_input not in ("noisy", "clean"):
            raise InvalidConfig("train.perception_input must be 'noisy' or 'clean'")
        if self.train.train_frames not in ("all", "first"):
            raise InvalidConfig("train.train_frames must be 'all' or 'first'")
        if self.train.stage1_epochs + self.train.stage2_epochs < 1:
            raise InvalidConfig("stage1_epochs + stage2_epochs must be at least 1")
        for name in ("lambda_ce", "lambda_sem", "lambda_geo"):
            if not getattr(self.perception, name) >= 0:
                raise InvalidConfig(f"perception.{name} must be nonnegative")
        if len(self.world.grid_dims) != 3 or len(self.world.image_size) != 2:
            raise InvalidConfig("grid_dims needs 3 entries and image_size 2")
        bottleneck = [s // 2 ** (len(self.denoiser.widths) - 1) for s in self.world.image_size]
        if any(b % self.mda.patch_size for b in bottleneck):
            raise InvalidConfig(f"bottleneck {bottleneck} not divisible by patch size {self.mda.patch_size}")
        return self

    def copy(self) -> "Config":
        return from_dict(self.to_dict())


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise InvalidConfig(f"{where or 'config'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise InvalidConfig(f"unknown keys in {where or 'config'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING else fields[name].default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}".lstrip("."))
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict) -> Config:
    return _build(Config, data, "").validate()


def _coerce(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: Config, overrides) -> Config:
    """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
    data = cfg.to_dict()
    for item in overrides or ():
        if "=" not in item:
            raise InvalidConfig(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise InvalidConfig(f"unknown config section {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise InvalidConfig(f"unknown config key {key!r}")
        node[parts[-1]] = _coerce(value)
    return from_dict(data)


def load_config(path=None, overrides=None) -> Config:
    if path is None:
        cfg = Config()
    else:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"{path}: {exc}") from exc
        cfg = from_dict(data)
    return apply_overrides(cfg, overrides)
