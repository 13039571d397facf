"""Dataclass configuration tree with JSON (de)serialization."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


@dataclass
class RasterConfig:
    near: float = 0.01
    # hits with G below this are skipped
    weight_cutoff: float = 1.0 / 255.0
    # front-to-back blending stops once transmittance drops below this
    transmittance_cutoff: float = 1e-4
    # splats projecting smaller than this (px) get a screen-space low-pass
    # footprint of the same size; 0 disables the filter
    min_footprint_px: float = 0.5
    normalize_depth: bool = True
    normalize_normal: bool = True
    normalize_material: bool = False


@dataclass
class ShadingConfig:
    mask_threshold: float = 0.5
    roughness_floor: float = 0.04
    denom_floor: float = 1e-6


@dataclass
class LightFieldConfig:
    bands: int = 6
    hidden: int = 128
    depth: int = 4


@dataclass
class TraceConfig:
    early_exit: float = 1e-3
    # exclude_self_radius = factor * median splat scale
    self_radius_factor: float = 3.0
    support_sigma: float = 3.0
    leaf_size: int = 4
    recompute_every_epoch: bool = False


@dataclass
class LossWeights:
    normal_consistency: float = 0.05
    normal_reg: float = 0.1
    mask: float = 0.01
    incident: float = 0.1
    # "l1" | "l2" | "cosine"
    normal_reg_kind: str = "l1"
    # "visibility" | "visibility_intensity"
    incident_target: str = "visibility"

    def __post_init__(self) -> None:
        for name in ("normal_consistency", "normal_reg", "mask", "incident"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


@dataclass
class LearningRates:
    means: float = 1.6e-4
    tangents: float = 5e-3
    log_scales: float = 5e-3
    opacity: float = 5e-2
    sh: float = 2.5e-3
    albedo: float = 1e-2
    metallic: float = 1e-2
    roughness: float = 1e-2
    light_mlp: float = 1e-3
    # means lr is scaled by the scene extent and decays to this fraction
    means_final_fraction: float = 0.01


@dataclass
class DensifyConfig:
    start: int = 500
    stop: int = 10_000
    interval: int = 100
    grad_threshold: float = 2e-4
    min_opacity: float = 0.005
    # split instead of clone when the largest scale exceeds this fraction of the extent
    percent_dense: float = 0.01
    # prune splats whose largest scale exceeds this fraction of the extent
    max_scale_fraction: float = 0.1
    opacity_reset_interval: int = 0
    max_gaussians: int = 20_000


@dataclass
class TrainConfig:
    stage1_iters: int = 15_000
    stage2_iters: int = 15_000
    seed: int = 0
    deterministic: bool = True
    dtype: str = "float32"
    lights_per_step: int = 0  # 0 = every training light of the view
    num_init_points: int = 2000
    checkpoint_every: int = 5000
    log_every: int = 100
    normal_reg: bool = True
    sh_degree: int = 3
    lr: LearningRates = field(default_factory=LearningRates)
    densify: DensifyConfig = field(default_factory=DensifyConfig)


@dataclass
class Config:
    raster: RasterConfig = field(default_factory=RasterConfig)
    shading: ShadingConfig = field(default_factory=ShadingConfig)
    light_field: LightFieldConfig = field(default_factory=LightFieldConfig)
    trace: TraceConfig = field(default_factory=TraceConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Config":
        return _build(cls, data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "Config":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _build(cls, data: dict[str, Any]):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ValueError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def desk_config() -> Config:
    """Reduced schedule used for the 64x64 synthetic sphere on a laptop CPU."""
    cfg = Config()
    t = cfg.train
    t.stage1_iters = 1000
    t.stage2_iters = 600
    t.num_init_points = 1500
    t.checkpoint_every = 0
    t.log_every = 50
    t.densify = DensifyConfig(start=200, stop=700, interval=100, max_gaussians=2500)
    return cfg


def apply_overrides(config: Config, pairs: list[str]) -> Config:
    """Apply ``section.key=value`` overrides; values are parsed as JSON, falling back to strings."""
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"override {pair!r} is not of the form key=value")
        key, raw = pair.split("=", 1)
        *path, last = key.strip().split(".")
        obj = config
        for part in path:
            if not hasattr(obj, part) or not dataclasses.is_dataclass(getattr(obj, part)):
                raise ValueError(f"unknown config section {part!r} in {key!r}")
            obj = getattr(obj, part)
        if not dataclasses.is_dataclass(obj) or last not in {f.name for f in dataclasses.fields(obj)}:
            raise ValueError(f"unknown config key {key!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        current = getattr(obj, last)
        if isinstance(current, bool) != isinstance(value, bool) or dataclasses.is_dataclass(current):
            raise ValueError(f"config key {key!r} cannot take value {raw!r}")
        if isinstance(current, float) and isinstance(value, int):
            value = float(value)
        if type(value) is not type(current):
            raise ValueError(f"config key {key!r} expects {type(current).__name__}, got {raw!r}")
        setattr(obj, last, value)
    return config
