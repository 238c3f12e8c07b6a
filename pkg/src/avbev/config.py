"""Run configuration: JSON-loadable, fully defaulted, hashable.

Every field has a default so `avbev generate --out d` works bare; a config
file only overrides what it names.  Unknown keys are rejected so typos
fail loudly.  ``hash()`` is the sha256 of the canonical JSON of all fields
and stamps manifests, checkpoints metadata and reports.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path


class ConfigError(ValueError):
    pass


def _default_layout_mix() -> dict:
    return {"straight": 0.45, "curve": 0.35, "intersection": 0.2}


def _default_loss_weights() -> dict:
    return {"semantic": 1.0, "heatmap": 1.0, "offset": 0.15, "flow": 0.15,
            "costmap": 0.1}


def _default_class_weights() -> list:
    # per-class loss scale: drivable, lane, vehicle, pedestrian
    return [1.0, 1.5, 3.0, 3.0]


@dataclass
class RunConfig:
    # reproducibility
    seed: int = 7

    # world / dataset
    n_train_scenes: int = 256
    n_val_scenes: int = 32
    scene_duration: int = 12            # steps at 2 Hz
    agents_min: int = 3
    agents_max: int = 6
    layout_mix: dict = field(default_factory=_default_layout_mix)
    ambiguous_scenes: bool = False      # attended-class task worlds
    image_size: list = field(default_factory=lambda: [96, 192])

    # BEV grid (training scale; the standalone geometry default is 100 m)
    grid_extent: float = 24.0
    grid_resolution: float = 0.5

    # model
    channels: int = 18
    depth_bins: int = 32
    depth_start: float = 0.75
    depth_step: float = 0.5
    embed_dim: int = 64
    history: int = 2
    enc_width1: int = 12
    enc_width2: int = 28
    enc_kernel2: int = 7
    head_hidden: int = 20
    cost_hidden: int = 16
    refiner_hidden: int = 32
    delta_max: float = 0.5
    refine_iterations: int = 1

    # text conditioning
    text_enabled: bool = True
    embedding_source: str = "stub"      # "stub" | "file"
    embedding_file: str | None = None
    text_view: str = "front"            # "front" | "all"

    # training
    steps: int = 2000
    learning_rate: float = 2.0e-3
    polyak_tail: int = 300          # parameter averaging window at the end
    log_every: int = 25
    loss_weights: dict = field(default_factory=_default_loss_weights)
    class_weights: list = field(default_factory=_default_class_weights)
    costmap_margin: float = 1.0
    refiner_steps: int = 0              # > 0 adds the scripted refiner stage

    # planner sampling
    lateral_offsets: list = field(
        default_factory=lambda: [-1.5, -0.75, 0.0, 0.75, 1.5])
    speed_factors: list = field(default_factory=lambda: [0.0, 0.5, 1.0, 1.25])
    horizons: list = field(default_factory=lambda: [1.0, 2.0, 3.0])

    # evaluation
    eval_frames_per_scene: int = 2
    mask_threshold: float = 0.5

    def validate(self):
        if self.embedding_source not in ("stub", "file"):
            raise ConfigError(
                f"embedding_source must be stub|file, got {self.embedding_source!r}")
        if self.embedding_source == "file":
            if not self.embedding_file:
                raise ConfigError("embedding_source=file requires embedding_file")
            if not Path(self.embedding_file).exists():
                raise ConfigError(f"embedding file {self.embedding_file} not found")
        if self.text_view not in ("front", "all"):
            raise ConfigError(f"text_view must be front|all, got {self.text_view!r}")
        if len(self.image_size) != 2 or any(s % 8 for s in self.image_size):
            raise ConfigError(
                f"image_size must be two multiples of 8, got {self.image_size}")
        if self.history < 0:
            raise ConfigError("history must be >= 0")
        if len(self.class_weights) != 4:
            raise ConfigError("class_weights needs 4 entries")
        n = self.grid_extent / self.grid_resolution
        if abs(n - round(n)) > 1e-9:
            raise ConfigError("grid extent must be a multiple of the resolution")
        if list(self.horizons) != [1.0, 2.0, 3.0]:
            raise ConfigError("horizons are fixed at 1/2/3 s by the metrics")
        return self

    def sampler_config(self):
        from .planner import SamplerConfig
        return SamplerConfig(lateral_offsets=tuple(self.lateral_offsets),
                             speed_factors=tuple(self.speed_factors))

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def depth_centers(self):
        import numpy as np
        return self.depth_start + self.depth_step * np.arange(self.depth_bins)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            with open(path) as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        return cls.from_dict(data)

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw).validate()
