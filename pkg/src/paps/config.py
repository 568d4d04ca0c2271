"""Run configuration: presets, YAML files and ``key=value`` overrides."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from paps.model.backbone import BackboneConfig
from paps.model.network import ModelConfig
from paps.scenegen import SceneGenConfig

OUTPUT_ROOT_ENV = "PAPS_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    height: int = 64
    width: int = 64
    n_stuff: int = 4
    n_thing: int = 3
    min_instances: int = 2
    max_instances: int = 5
    min_size: float = 12.0
    max_size: float = 28.0
    min_center_distance: float = 4.0
    num_scenes: int = 200

    def scene_config(self, n_layers: int) -> SceneGenConfig:
        return SceneGenConfig(
            height=self.height,
            width=self.width,
            n_stuff=self.n_stuff,
            n_thing=self.n_thing,
            min_instances=self.min_instances,
            max_instances=self.max_instances,
            min_size=self.min_size,
            max_size=self.max_size,
            min_center_distance=self.min_center_distance,
            max_occlusion_depth=n_layers,
        )


@dataclass
class NetConfig:
    width: int = 64
    stage_channels: tuple = (16, 32, 64, 64)
    head_channels: tuple = (64, 32)
    norm: str = "group"
    cross_task: str = "full"
    gate_channels: int = 32
    refiner_memory: int = 128
    refiner_channels: int = 64


@dataclass
class TrainConfig:
    batch_size: int = 4
    lr: float = 1e-3
    poly_power: float = 0.9
    stage1_steps: int = 3000
    stage2_steps: int = 500
    scale_range: tuple = (0.5, 2.0)
    flip: bool = True
    augment: bool = True
    sigma: float = 2.0
    # pixels of instances smaller than this get triple weight in the CE losses
    small_instance_area: int = 16 * 16
    bootstrap_warmup: int = 1500
    log_every: int = 50
    eval_every: int = 0
    checkpoint_every: int = 500


@dataclass
class RunConfig:
    preset: str = "toy"
    seed: int = 0
    n_layers: int = 4
    crop: tuple = (64, 64)
    output_dir: str = "runs/toy"
    deterministic: bool = True
    data: DataConfig = field(default_factory=DataConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        h, w = self.crop
        if h % 32 or w % 32:
            raise ConfigError(f"crop {self.crop} must be divisible by 32")
        lo, hi = self.train.scale_range
        if not 0 < lo <= hi:
            raise ConfigError(f"bad scale range {self.train.scale_range}")
        if self.train.lr <= 0 or self.train.batch_size < 1:
            raise ConfigError("lr and batch_size must be positive")
        self.data.scene_config(self.n_layers).validate()

    def model_config(self, use_refiner: bool = True) -> ModelConfig:
        n = self.net
        return ModelConfig(
            n_stuff=self.data.n_stuff,
            n_thing=self.data.n_thing,
            n_layers=self.n_layers,
            backbone=BackboneConfig(
                stage_channels=tuple(n.stage_channels), width=n.width, norm=n.norm, toy_preset=self.preset == "toy"
            ),
            head_channels=tuple(n.head_channels),
            cross_task=n.cross_task,
            gate_channels=n.gate_channels,
            use_refiner=use_refiner,
            refiner_memory=n.refiner_memory,
            refiner_channels=n.refiner_channels,
            crop_size=tuple(self.crop),
        )

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def output_path(self) -> Path:
        p = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        return p if p.is_absolute() or not root else Path(root) / p


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def toy_preset() -> RunConfig:
    return RunConfig()


def paper_shape_preset() -> RunConfig:
    """Full-size shapes and constants; far too large to train at desk scale."""
    return RunConfig(
        preset="paper-shape",
        n_layers=8,
        crop=(384, 1408),
        output_dir="runs/paper-shape",
        data=DataConfig(height=384, width=1408, n_stuff=10, n_thing=7, min_size=40, max_size=200, max_instances=12),
        net=NetConfig(width=256, stage_channels=(48, 96, 192, 384), head_channels=(128, 32), norm="batch", gate_channels=64),
        train=TrainConfig(batch_size=8, stage1_steps=150_000, stage2_steps=50_000, sigma=8.0, small_instance_area=64 * 64, bootstrap_warmup=0),
    )


PRESETS = {"toy": toy_preset, "paper-shape": paper_shape_preset}


def _coerce(template, value):
    if isinstance(template, bool):
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"expected a boolean, got {value!r}")
        return bool(value)
    if isinstance(template, tuple):
        if isinstance(value, str):
            value = yaml.safe_load(value)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {value!r}")
        return tuple(value)
    if isinstance(template, (int, float)) and isinstance(value, str):
        try:
            return type(template)(yaml.safe_load(value))
        except (TypeError, ValueError):
            raise ConfigError(f"expected a number, got {value!r}") from None
    if isinstance(template, float) and isinstance(value, int):
        return float(value)
    return value


def apply_dict(cfg, data: dict, prefix: str = ""):
    names = {f.name for f in dataclasses.fields(cfg)}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"unknown config key {prefix}{key}")
        current = getattr(cfg, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{prefix}{key} must be a mapping")
            apply_dict(current, value, f"{prefix}{key}.")
        else:
            setattr(cfg, key, _coerce(current, value))
    return cfg


def apply_override(cfg: RunConfig, item: str) -> RunConfig:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, value = item.split("=", 1)
    nested: dict = {}
    cursor = nested
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cursor = cursor.setdefault(p, {})
    cursor[parts[-1]] = value
    return apply_dict(cfg, nested)


def load_config(path=None, overrides=(), preset: str | None = None) -> RunConfig:
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
    name = preset or data.get("preset", "toy")
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}")
    cfg = PRESETS[name]()
    apply_dict(cfg, {k: v for k, v in data.items() if k != "preset"})
    for item in overrides:
        apply_override(cfg, item)
    cfg.validate()
    return cfg


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data)
    cfg = PRESETS[data.pop("preset", "toy")]()
    return apply_dict(cfg, data)
