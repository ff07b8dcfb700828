"""Run configuration: dataclass schema, desk/full profiles, strict YAML loading.

The config file is hierarchical key-value YAML.  Keys are validated
recursively against the dataclass schema and unknown keys are hard
errors: a silently ignored hyperparameter typo is the main operator
hazard.  ``profile`` selects the baseline before field overrides apply.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass

import yaml

from .augment import AugmentationConfig
from .losses import LossWeights


class ConfigError(ValueError):
    """Raised for unknown keys, bad types, or invalid values in a run config."""


@dataclass
class GeometryConfig:
    n_proposals: int = 1024
    proposal_radius: float = 1.0
    proposal_max_points: int = 16
    num_patches: int = 4  # 0 disables the patch branch; the keypoint scheme fixes 4
    patch_offset: float = 1.0 / 3.0
    patch_radius: float = 1.0 / 3.0
    patch_max_points: int = 8
    ransac_iters: int = 100
    ransac_inlier_tol: float = 0.15
    ground_margin: float = 0.20

    def validate(self) -> None:
        if self.num_patches not in (0, 4):
            raise ConfigError(f"num_patches must be 0 or 4, got {self.num_patches}")
        for name in ("n_proposals", "proposal_max_points", "patch_max_points", "ransac_iters"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("proposal_radius", "patch_radius", "patch_offset", "ransac_inlier_tol"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


@dataclass
class ModelConfig:
    feature_dim: int = 512  # C: grid and region embedding width
    projection_dim: int = 128  # z: contrastive head width
    bev_mid_channels: int = 512  # channels scattered onto the grid before the conv
    backbone_hidden: int = 32
    grid_h: int = 64
    grid_w: int = 64

    def validate(self) -> None:
        for name in ("feature_dim", "projection_dim", "bev_mid_channels", "backbone_hidden", "grid_h", "grid_w"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")


@dataclass
class TrainConfig:
    steps: int = 300
    batch_scenes: int = 4
    max_lr: float = 0.003
    warmup_frac: float = 0.05
    checkpoint_every: int = 100
    debug_checks: bool = False

    def validate(self) -> None:
        if self.steps < 1 or self.batch_scenes < 1 or self.checkpoint_every < 1:
            raise ConfigError("steps, batch_scenes and checkpoint_every must be positive")
        if self.max_lr <= 0:
            raise ConfigError("max_lr must be positive")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac must be in [0, 1)")


@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    scene_dir: str = ""
    out_dir: str = "runs/default"
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    p2p_negative_pool: str = "mixed"

    def validate(self) -> None:
        self.augment.validate()
        self.geometry.validate()
        self.model.validate()
        self.loss.validate()
        self.train.validate()
        if self.p2p_negative_pool not in ("mixed", "cross"):
            raise ConfigError(f"p2p_negative_pool must be mixed or cross, got {self.p2p_negative_pool!r}")


def desk_config() -> RunConfig:
    """Laptop-scale profile: every mechanism intact, widths and counts shrunk."""
    cfg = RunConfig(profile="desk")
    cfg.geometry.n_proposals = 64
    cfg.model.feature_dim = 64
    cfg.model.projection_dim = 32
    cfg.model.bev_mid_channels = 16
    return cfg


def full_config() -> RunConfig:
    """Full-scale hyperparameters; far too heavy for a laptop training run."""
    return RunConfig(profile="full")


_PROFILES = {"desk": desk_config, "full": full_config}


def _coerce(value, target, key: str):
    if isinstance(target, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"config: key '{key}' expects a boolean")
    if isinstance(target, int) and not isinstance(target, bool):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"config: key '{key}' expects an integer")
    if isinstance(target, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"config: key '{key}' expects a number")
    if isinstance(target, str):
        if isinstance(value, str):
            return value
        raise ConfigError(f"config: key '{key}' expects a string")
    if isinstance(target, tuple):
        if isinstance(value, (list, tuple)) and len(value) == len(target):
            return tuple(float(v) for v in value)
        raise ConfigError(f"config: key '{key}' expects a list of {len(target)} numbers")
    raise ConfigError(f"config: key '{key}' has unsupported type")


def _apply(obj, data: dict, prefix: str = "") -> None:
    names = {f.name for f in fields(obj)}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in names:
            raise ConfigError(f"config: unknown key '{path}'")
        current = getattr(obj, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"config: key '{path}' expects a mapping")
            _apply(current, value, prefix=f"{path}.")
        else:
            setattr(obj, key, _coerce(value, current, path))


def load_config(path) -> RunConfig:
    """Parse and validate a run config file; unknown keys are errors."""
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be a mapping")
    profile = data.pop("profile", "desk")
    if profile not in _PROFILES:
        raise ConfigError(f"config: unknown profile '{profile}'")
    cfg = _PROFILES[profile]()
    _apply(cfg, data)
    cfg.validate()
    return cfg


def config_hash(cfg: RunConfig) -> str:
    """Stable content hash of every hyperparameter (ordering-independent)."""
    payload = json.dumps(asdict(cfg), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def config_to_dict(cfg: RunConfig) -> dict:
    return asdict(cfg)


def config_from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    _apply(cfg, data)
    cfg.validate()
    return cfg
