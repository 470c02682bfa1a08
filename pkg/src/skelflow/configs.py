"""Run configuration: one dataclass tree, YAML snapshots, presets.

A RunConfig collects every knob of the pipeline (model, training, data,
sampling, editing, retargeting). Config files and flag overrides are
overlays: start from a preset, replace only the keys that are present.
Unknown keys fail loudly with their dotted path so a typo never silently
falls back to a default. Snapshots written into run directories are full
trees, so a run is reproducible from its own directory alone.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import yaml

from . import __version__
from .features import FeatureLayout
from .flow import GENERATION_WEIGHTS, GuidanceWeights, TrainConfig
from .flowedit import RETARGET_SWEEP, EditConfig
from .model import ModelConfig
from .synthdata import DataConfig

__all__ = [
    "ConfigError", "SampleConfig", "RetargetConfig", "RunConfig",
    "desk_preset", "paper_preset", "PRESETS", "to_dict", "from_dict",
    "load_config", "save_config", "run_root", "prepare_run_dir",
]


class ConfigError(ValueError):
    """Invalid or unknown configuration; the message names the dotted key."""


@dataclass(frozen=True)
class SampleConfig:
    weights: GuidanceWeights = GENERATION_WEIGHTS
    steps: int = 100
    frames: int = 64
    seed: int = 0
    fps: float = 30.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        if self.fps <= 0:
            raise ValueError("fps must be positive")


@dataclass(frozen=True)
class RetargetConfig:
    steps: int = 100
    sweep: Tuple[int, ...] = RETARGET_SWEEP
    seed: int = 0
    frozen_noise: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if len(self.sweep) == 0:
            raise ValueError("sweep must name at least one start step")
        if any(not 0 < k < self.steps for k in self.sweep):
            raise ValueError("sweep start steps must lie strictly inside (0, steps)")


def _desk_model() -> ModelConfig:
    return ModelConfig(joints=16, feat_dim=FeatureLayout(16).total_dim)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=_desk_model)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    edit: EditConfig = field(default_factory=EditConfig)
    retarget: RetargetConfig = field(default_factory=RetargetConfig)

    def __post_init__(self):
        layout = FeatureLayout(self.data.joints)
        if self.model.joints != self.data.joints:
            raise ConfigError(
                f"model.joints ({self.model.joints}) != data.joints ({self.data.joints})")
        if self.model.feat_dim != layout.total_dim:
            raise ConfigError(
                f"model.feat_dim ({self.model.feat_dim}) does not match the "
                f"{self.data.joints}-joint feature width ({layout.total_dim})")
        if self.model.prompt_len != self.data.prompt_len:
            raise ConfigError(
                f"model.prompt_len ({self.model.prompt_len}) != data.prompt_len "
                f"({self.data.prompt_len})")


def desk_preset() -> RunConfig:
    """Laptop-scale default: 16 joints, 128-wide, 4 layers."""
    return RunConfig()


def paper_preset() -> RunConfig:
    """Full-scale reference settings: 24 joints, 432-wide, 12 layers,
    low learning rate with large batches. Not meant for CPU runs."""
    return RunConfig(
        model=ModelConfig(joints=24, feat_dim=FeatureLayout(24).total_dim,
                          hidden_dim=432, n_layers=12, frame_heads=12),
        train=TrainConfig(lr=5e-5, weight_decay=5e-3, batch=512, epochs=500),
        data=DataConfig(n_clips=512, joints=24),
    )


PRESETS = {"desk": desk_preset, "paper": paper_preset}


def to_dict(cfg: Any) -> Any:
    """Dataclass tree to plain YAML-safe containers (tuples become lists)."""
    if dataclasses.is_dataclass(cfg) and not isinstance(cfg, type):
        return {f.name: to_dict(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}
    if isinstance(cfg, (tuple, list)):
        return [to_dict(v) for v in cfg]
    return cfg


def _freeze(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    return value


def _overlay(base: Any, mapping: Dict[str, Any], path: str) -> Any:
    if not isinstance(mapping, dict):
        raise ConfigError(f"expected a mapping for {path or 'the config root'}")
    names = {f.name for f in dataclasses.fields(base)}
    kwargs: Dict[str, Any] = {}
    for key, value in mapping.items():
        if key not in names:
            raise ConfigError(f"unknown config key: {path}{key}")
        current = getattr(base, key)
        if dataclasses.is_dataclass(current) and isinstance(value, dict):
            kwargs[key] = _overlay(current, value, f"{path}{key}.")
        else:
            kwargs[key] = _freeze(value)
    try:
        return dataclasses.replace(base, **kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value under {path or 'the config root'}: {exc}") from exc


def from_dict(mapping: Dict[str, Any], base: Optional[RunConfig] = None) -> RunConfig:
    """Overlay a (possibly partial) mapping onto base (default: desk preset)."""
    return _overlay(base if base is not None else desk_preset(), mapping or {}, "")


def load_config(path, base: Optional[RunConfig] = None) -> RunConfig:
    text = Path(path).read_text()
    try:
        mapping = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, dict):
        raise ConfigError(f"{path} must contain a mapping at top level")
    return from_dict(mapping, base)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))


def run_root() -> Path:
    """Parent for run directories; override with SKELFLOW_RUN_ROOT."""
    return Path(os.environ.get("SKELFLOW_RUN_ROOT", "runs"))


def prepare_run_dir(out_dir, cfg: RunConfig) -> Path:
    """Create out_dir and make it self-describing: the full config snapshot
    plus the code version. No timestamps; reruns overwrite deterministically."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    (out / "version.txt").write_text(f"skelflow {__version__}\n")
    return out
