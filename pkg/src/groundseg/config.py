"""Run configuration: every tunable of the pipeline in one hashable structure."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import yaml

from .errors import InvalidParam
from .lidar_io import GROUND_CLASSES
from .pillars import GridConfig


@dataclass(frozen=True)
class RunConfig:
    # grid
    x_range: tuple[float, float] = (-51.2, 51.2)
    y_range: tuple[float, float] = (-51.2, 51.2)
    z_range: tuple[float, float] = (-4.0, 4.0)
    pillar_size: float = 0.8
    max_points: int = 64
    # normals
    k: int = 30
    corrected_normal_sign: bool = False
    use_normals: bool = True
    # undersampling
    undersample: str = "controlled"  # controlled | uniform | none
    budget: int = 100_000
    section_interval: float = 0.8
    # ground truth
    ground_classes: tuple[int, ...] = tuple(sorted(GROUND_CLASSES))
    pillar_ground_threshold: float = 0.5
    # network
    encoder_channels: int = 64
    ladder: tuple[int, ...] = (64, 64, 128, 256)
    attention: bool = True
    reduction: int = 16
    # loss / optimisation
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    lr: float = 0.003
    weight_decay: float = 0.0005
    plateau_factor: float = 0.35
    plateau_patience: int = 3
    plateau_threshold: float = 1e-4
    batch_size: int = 16
    epochs: int = 20
    steps: int = 0  # > 0 overrides epochs
    # inference
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.undersample not in ("controlled", "uniform", "none"):
            raise InvalidParam(f"unknown undersample mode {self.undersample!r}")
        if self.budget <= 0 or self.k < 3 or self.batch_size < 1 or self.lr <= 0:
            raise InvalidParam("budget, k >= 3, batch_size and lr must be positive")
        if len(self.ladder) != 4:
            raise InvalidParam("ladder needs four channel counts (three pooling levels)")
        if not 0.0 <= self.threshold <= 1.0:
            raise InvalidParam("threshold must lie in [0, 1]")
        self.grid  # validates geometry

    @property
    def grid(self) -> GridConfig:
        return GridConfig(tuple(self.x_range), tuple(self.y_range), tuple(self.z_range),
                          self.pillar_size, self.max_points)

    @property
    def n_features(self) -> int:
        return 12 if self.use_normals else 9

    def to_dict(self) -> dict[str, Any]:
        return {f.name: _plain(getattr(self, f.name)) for f in fields(self)}

    @property
    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def preprocess_hash(self) -> str:
        """Hash over the fields that shape the network input and labels."""
        d = {k: v for k, v in self.to_dict().items() if k in PREPROCESS_FIELDS}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise InvalidParam(f"unknown config keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path | None, **overrides) -> "RunConfig":
        data: dict[str, Any] = {}
        if path:
            data = yaml.safe_load(Path(path).read_text()) or {}
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


PREPROCESS_FIELDS = frozenset({
    "x_range", "y_range", "z_range", "pillar_size", "max_points", "k", "corrected_normal_sign",
    "use_normals", "undersample", "budget", "section_interval", "ground_classes",
    "pillar_ground_threshold",
})
