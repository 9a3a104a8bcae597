"""Run configuration: defaults, YAML files and command-line overrides."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from typing import Optional, Tuple

import yaml

from .errors import ConfigError
from .features import FEATURE_MODES

# per-scene-class overrides of the arch defaults
SCENE_CLASS_DEFAULTS = {
    "arch": {},
    "tunnel": {"voxel_size": 0.01, "feature_radius": 0.6},
}


@dataclass(frozen=True)
class RunConfig:
    voxel_size: float = 0.02
    normal_radius: float = 0.12
    feature_radius: float = 1.0
    intensity_radius: Optional[float] = None  # None: same as feature_radius
    bins: int = 30
    bank_size: int = 4000
    seed: int = 0
    thresholds: Tuple[float, ...] = (0.3, 0.5)
    feature_mode: str = "multi"
    intensity_weight: float = 1.0
    normal_viewpoint: Optional[Tuple[float, float, float]] = None
    relative_intensity: bool = False
    coreset_start: str = "random"
    projection_dim: Optional[int] = None
    k_max: int = 1024
    workers: int = 1
    kde_grid: int = 512
    figures: bool = True

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        if self.normal_viewpoint is not None:
            object.__setattr__(self, "normal_viewpoint", tuple(float(v) for v in self.normal_viewpoint))
        self.validate()

    def validate(self) -> None:
        for name in ("normal_radius", "feature_radius"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.voxel_size < 0:
            raise ConfigError(f"voxel_size must be >= 0, got {self.voxel_size}")
        if self.intensity_radius is not None and not self.intensity_radius > 0:
            raise ConfigError(f"intensity_radius must be positive, got {self.intensity_radius}")
        for name in ("bins", "bank_size", "k_max", "workers", "kde_grid"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.projection_dim is not None and self.projection_dim < 1:
            raise ConfigError(f"projection_dim must be a positive integer, got {self.projection_dim}")
        if self.feature_mode not in FEATURE_MODES:
            raise ConfigError(f"feature_mode must be one of {FEATURE_MODES}, got {self.feature_mode!r}")
        if self.coreset_start not in ("random", "max_norm"):
            raise ConfigError(f"coreset_start must be 'random' or 'max_norm', got {self.coreset_start!r}")
        if not self.thresholds or any(not 0 <= t <= 1 for t in self.thresholds):
            raise ConfigError(f"thresholds must be fractions in [0, 1], got {self.thresholds}")
        if self.intensity_weight < 0:
            raise ConfigError(f"intensity_weight must be >= 0, got {self.intensity_weight}")
        if self.normal_viewpoint is not None and len(self.normal_viewpoint) != 3:
            raise ConfigError("normal_viewpoint needs three coordinates")

    @property
    def effective_intensity_radius(self) -> float:
        return self.feature_radius if self.intensity_radius is None else self.intensity_radius

    def to_dict(self) -> dict:
        d = asdict(self)
        d["thresholds"] = list(self.thresholds)
        if self.normal_viewpoint is not None:
            d["normal_viewpoint"] = list(self.normal_viewpoint)
        return d

    def with_overrides(self, **changes) -> "RunConfig":
        return config_from_dict({**self.to_dict(), **changes})


def config_field_names() -> Tuple[str, ...]:
    return tuple(f.name for f in fields(RunConfig))


def config_from_dict(data: dict, scene_class: Optional[str] = None) -> RunConfig:
    """Build a config from a mapping; unspecified fields take the (scene-class) defaults."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping of field names to values")
    unknown = sorted(set(data) - set(config_field_names()))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    base = {}
    if scene_class is not None:
        if scene_class not in SCENE_CLASS_DEFAULTS:
            raise ConfigError(f"unknown scene class {scene_class!r}")
        base = dict(SCENE_CLASS_DEFAULTS[scene_class])
    try:
        return RunConfig(**{**base, **data})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None


def defaults_for(scene_class: str = "arch") -> RunConfig:
    return config_from_dict({}, scene_class)


def load_config(path: str, scene_class: Optional[str] = None) -> RunConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: malformed YAML: {exc}") from None
    try:
        return config_from_dict(data or {}, scene_class)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def dump_config(cfg: RunConfig, path: Optional[str] = None) -> str:
    text = yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=None)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def replace_config(cfg: RunConfig, **changes) -> RunConfig:
    try:
        return replace(cfg, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None
