"""Run configuration: one JSON document covering every subsystem.

Two profiles ship with the package: the desk profile (small grids, trains
in minutes on a CPU) and the paper-scale profile (full-resolution shapes,
used for shape checks only). Environment variables with the RADE_ prefix
override top-level scalars, e.g. RADE_SEED=7, RADE_ABLATION_MODE=R.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .cross_attention import DeformAttnConfig
from .dataio import SceneConfig
from .errors import ConfigError
from .evaluation import EvalConfig
from .geometry import CameraModel, GridSpec, RegionOfInterest
from .losses import LossWeights
from .radar_backbone import BackboneConfig

ABLATION_MODES = ("R", "R+C", "R+C+W", "R+C*+W")

ENV_PREFIX = "RADE_"


@dataclass
class VisionConfig:
    backend: str = "stub"
    patch_size: int = 16
    c_vit: int = 64
    stub_seed: int = 0
    external_path: Optional[str] = None
    # Backend used by the encoder-swap ablation mode (R+C*+W).
    alt_backend: str = "stub"
    alt_stub_seed: int = 101
    alt_external_path: Optional[str] = None


@dataclass
class LiftConfig:
    hidden: int = 64
    per_channel: bool = False  # reserved variant, not implemented


@dataclass
class FusionConfig:
    per_channel: bool = True
    hidden: Optional[int] = None


@dataclass
class HeadConfig:
    head_channels: Optional[int] = None
    sigma: float = 0.75
    score_threshold: float = 0.3
    top_k: int = 50


@dataclass
class OptimConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    min_lr: float = 1e-4
    batch_size: int = 6
    epochs: int = 11
    max_steps: Optional[int] = None
    log_every: int = 10

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")


@dataclass
class ConditionSpec:
    tag: str = "normal"
    weight: float = 1.0
    occlusion_mode: str = "none"


@dataclass
class RunConfig:
    grid: GridSpec
    camera: CameraModel
    scene: SceneConfig
    backbone: BackboneConfig
    vision: VisionConfig = field(default_factory=VisionConfig)
    attention: DeformAttnConfig = field(default_factory=DeformAttnConfig)
    lift: LiftConfig = field(default_factory=LiftConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    eval: EvalConfig = field(default_factory=EvalConfig)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    conditions: Tuple[ConditionSpec, ...] = (ConditionSpec(),)
    n_objects: Tuple[int, int] = (1, 3)
    plot_size_px: Tuple[int, int] = (640, 640)
    ablation_mode: str = "R+C+W"
    seed: int = 0

    def __post_init__(self):
        if self.ablation_mode not in ABLATION_MODES:
            raise ConfigError(
                f"ablation_mode must be one of {ABLATION_MODES}, got {self.ablation_mode!r}"
            )
        self.validate()

    @property
    def pool_factor(self) -> int:
        return self.scene.raw_range // self.grid.n_range

    def validate(self) -> None:
        if self.scene.raw_range % self.grid.n_range or self.scene.raw_azimuth % self.grid.n_azimuth:
            raise ConfigError(
                f"raw grid ({self.scene.raw_range}, {self.scene.raw_azimuth}) must be an "
                f"integer multiple of the feature grid ({self.grid.n_range}, {self.grid.n_azimuth})"
            )
        fr = self.scene.raw_range // self.grid.n_range
        fa = self.scene.raw_azimuth // self.grid.n_azimuth
        if fr != fa:
            raise ConfigError(f"range/azimuth raw-to-feature factors differ: {fr} vs {fa}")
        if fr != self.backbone.total_downsample:
            raise ConfigError(
                f"backbone downsample {self.backbone.total_downsample} does not match "
                f"raw-to-feature factor {fr}"
            )
        if self.backbone.n_doppler != self.scene.n_doppler:
            raise ConfigError("backbone.n_doppler disagrees with scene.n_doppler")
        if self.backbone.n_elevation_raw != self.scene.raw_elevation:
            raise ConfigError("backbone.n_elevation_raw disagrees with scene.raw_elevation")
        total = sum(c.weight for c in self.conditions)
        if total <= 0:
            raise ConfigError("condition weights must sum to a positive value")

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        def plain(obj):
            if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
                if isinstance(obj, CameraModel):
                    return obj.to_dict()
                return {f.name: plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
            if isinstance(obj, (tuple, list)):
                return [plain(v) for v in obj]
            if isinstance(obj, np.ndarray):
                return obj.tolist()
            return obj

        return plain(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        def build(target, value):
            if isinstance(target, type) and dataclasses.is_dataclass(target):
                if target is CameraModel:
                    return CameraModel.from_dict(value)
                kwargs = {}
                for f in dataclasses.fields(target):
                    if f.name not in value:
                        continue
                    v = value[f.name]
                    nested = _NESTED_FIELDS.get((target, f.name))
                    if nested is not None:
                        if isinstance(v, list) and nested is ConditionSpec:
                            v = tuple(build(ConditionSpec, item) for item in v)
                        else:
                            v = build(nested, v)
                    elif isinstance(v, list):
                        v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
                    kwargs[f.name] = v
                return target(**kwargs)
            return value

        return build(cls, d)

    @classmethod
    def from_json(cls, s: str) -> "RunConfig":
        return cls.from_dict(json.loads(s))


_NESTED_FIELDS = {
    (RunConfig, "grid"): GridSpec,
    (RunConfig, "camera"): CameraModel,
    (RunConfig, "scene"): SceneConfig,
    (RunConfig, "backbone"): BackboneConfig,
    (RunConfig, "vision"): VisionConfig,
    (RunConfig, "attention"): DeformAttnConfig,
    (RunConfig, "lift"): LiftConfig,
    (RunConfig, "fusion"): FusionConfig,
    (RunConfig, "head"): HeadConfig,
    (RunConfig, "loss"): LossWeights,
    (RunConfig, "eval"): EvalConfig,
    (RunConfig, "optimizer"): OptimConfig,
    (RunConfig, "conditions"): ConditionSpec,
    (SceneConfig, "roi"): RegionOfInterest,
    (EvalConfig, "roi"): RegionOfInterest,
}


def _apply_env_overrides(cfg: RunConfig) -> RunConfig:
    """RADE_<FIELD> environment variables override top-level scalar fields."""
    seed = os.environ.get(ENV_PREFIX + "SEED")
    mode = os.environ.get(ENV_PREFIX + "ABLATION_MODE")
    if seed is not None:
        cfg.seed = int(seed)
    if mode is not None:
        if mode not in ABLATION_MODES:
            raise ConfigError(f"{ENV_PREFIX}ABLATION_MODE={mode!r} is not a valid mode")
        cfg.ablation_mode = mode
    return cfg


def load_config(path: Optional[str] = None, profile: str = "desk") -> RunConfig:
    """Load a config JSON (or a named profile) and apply env overrides."""
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                cfg = RunConfig.from_json(f.read())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except (json.JSONDecodeError, TypeError, KeyError) as e:
            raise ConfigError(f"cannot parse config {path}: {e}") from e
    elif profile == "desk":
        cfg = desk_profile()
    elif profile == "paper":
        cfg = paper_profile()
    else:
        raise ConfigError(f"unknown profile {profile!r}")
    return _apply_env_overrides(cfg)


def _default_camera(image_hw: Tuple[int, int], focal_px: float, cam_height_m: float) -> CameraModel:
    h, w = image_hw
    intr = np.array(
        [[focal_px, 0.0, w / 2.0], [0.0, focal_px, h / 2.0], [0.0, 0.0, 1.0]]
    )
    # Camera at (0, 0, cam_height) looking along ego +x: cam x = -y_ego,
    # cam y = -z_ego, cam z = +x_ego.
    rot = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    t = -rot @ np.array([0.0, 0.0, cam_height_m])
    extr = np.eye(4)
    extr[:3, :3] = rot
    extr[:3, 3] = t
    return CameraModel(intrinsics=intr, extrinsics=extr, image_size=image_hw)


def desk_profile() -> RunConfig:
    """Small profile that trains on a CPU in minutes."""
    grid = GridSpec(
        n_range=32,
        n_azimuth=16,
        n_elevation=4,
        range_bounds_m=(0.0, 72.0),
        azimuth_bounds_rad=(-math.pi / 4, math.pi / 4),
        elevation_bounds_m=(-2.0, 6.0),
    )
    return RunConfig(
        grid=grid,
        camera=_default_camera((160, 256), 180.0, 1.0),
        scene=SceneConfig(raw_range=64, raw_azimuth=32, n_doppler=16, raw_elevation=8),
        backbone=BackboneConfig(
            n_doppler=16, n_elevation_raw=8, channels=32, stage_channels=(16,), downsample=(2,)
        ),
        vision=VisionConfig(c_vit=64),
        head=HeadConfig(head_channels=32),
        optimizer=OptimConfig(batch_size=4, epochs=11),
    )


def paper_profile() -> RunConfig:
    """Full-resolution shapes from the published architecture (shape checks only)."""
    grid = GridSpec(
        n_range=256,
        n_azimuth=112,
        n_elevation=10,
        range_bounds_m=(0.0, 118.0),
        azimuth_bounds_rad=(-0.925, 0.925),
        elevation_bounds_m=(-2.0, 6.0),
    )
    return RunConfig(
        grid=grid,
        camera=_default_camera((720, 1280), 640.0, 1.2),
        scene=SceneConfig(raw_range=512, raw_azimuth=224, n_doppler=32, raw_elevation=16),
        backbone=BackboneConfig(
            n_doppler=32, n_elevation_raw=16, channels=128, stage_channels=(64,), downsample=(2,)
        ),
        vision=VisionConfig(c_vit=384),
        head=HeadConfig(head_channels=64),
        optimizer=OptimConfig(batch_size=6, epochs=11),
    )
