"""
KITTI / SemanticKITTI file I/O and a synthetic rotating-LiDAR scene generator.

Scan files (``velodyne/*.bin``) hold four little-endian ``float32`` values per
point: ``(x, y, z, intensity)``.  Label files (``labels/*.label``) hold one
little-endian ``uint32`` per point; the low 16 bits are the semantic class and
the high 16 bits the instance id.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import FormatError, InvalidParam, LengthMismatch

log = logging.getLogger(__name__)

SCAN_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("<u4")
RECORD_BYTES = 16

# SemanticKITTI ids
ROAD, PARKING, SIDEWALK, OTHER_GROUND = 40, 44, 48, 49
CAR, BUILDING, POLE = 10, 50, 80
GROUND_CLASSES = frozenset({ROAD, PARKING, SIDEWALK, OTHER_GROUND})


@dataclass
class PointCloud:
    """N points as an ``(N, 4)`` float32 array ``[x, y, z, intensity]``.

    ``labels`` is an optional ``(N,)`` array of semantic class ids.
    ``dropped`` counts non-finite records discarded on ingestion.
    """

    points: np.ndarray
    labels: Optional[np.ndarray] = None
    dropped: int = 0

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float32).reshape(-1, 4)
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != (len(self.points),):
                raise LengthMismatch(
                    f"{self.labels.shape[0]} labels for {len(self.points)} points"
                )

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]

    def subset(self, index: np.ndarray) -> "PointCloud":
        labels = None if self.labels is None else self.labels[index]
        return PointCloud(self.points[index], labels)


def read_scan(path: str | os.PathLike) -> PointCloud:
    """Read a KITTI velodyne scan; non-finite records are dropped and counted."""
    raw = Path(path).read_bytes()
    if len(raw) % RECORD_BYTES:
        raise FormatError(f"{path}: {len(raw)} bytes is not a multiple of {RECORD_BYTES}")
    pts = np.frombuffer(raw, dtype=SCAN_DTYPE).reshape(-1, 4)
    finite = np.isfinite(pts).all(axis=1)
    dropped = int((~finite).sum())
    if dropped:
        log.warning("%s: dropped %d non-finite points", path, dropped)
        pts = pts[finite]
    return PointCloud(pts.astype(np.float32), dropped=dropped)


def write_scan(path: str | os.PathLike, cloud: PointCloud) -> None:
    _atomic_write(path, cloud.points.astype(SCAN_DTYPE).tobytes())


def read_labels(path: str | os.PathLike, cloud: PointCloud) -> PointCloud:
    """Attach the semantic class (low 16 bits) of each label record to ``cloud``."""
    raw = Path(path).read_bytes()
    if len(raw) % LABEL_DTYPE.itemsize:
        raise FormatError(f"{path}: {len(raw)} bytes is not a multiple of 4")
    records = np.frombuffer(raw, dtype=LABEL_DTYPE)
    if len(records) != len(cloud):
        raise LengthMismatch(f"{len(records)} labels for {len(cloud)} points")
    return PointCloud(cloud.points, (records & 0xFFFF).astype(np.uint16), cloud.dropped)


def write_labels(path: str | os.PathLike, labels: np.ndarray, instances: np.ndarray | None = None) -> None:
    labels = np.asarray(labels, dtype=np.uint32)
    if instances is not None:
        labels = labels | (np.asarray(instances, dtype=np.uint32) << 16)
    _atomic_write(path, labels.astype(LABEL_DTYPE).tobytes())


def _atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    """Axis-aligned obstacle resting on the ground."""

    center: tuple[float, float]
    extent: tuple[float, float, float]
    density: float = 40.0  # points per m^2 of visible surface
    label: int = CAR

    def __post_init__(self):
        if self.density <= 0:
            raise InvalidParam("obstacle density must be positive")
        if min(self.extent) <= 0:
            raise InvalidParam("obstacle extent must be positive")

    def footprint_mask(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        hx, hy = self.extent[0] / 2, self.extent[1] / 2
        cx, cy = self.center
        return (np.abs(x - cx) <= hx) & (np.abs(y - cy) <= hy)


@dataclass(frozen=True)
class SceneSpec:
    ground_z: float = -1.73
    tilt: tuple[float, float] = (0.0, 0.0)  # radians about y (slope in x) and x (slope in y)
    obstacles: tuple[Box, ...] = ()
    noise_sigma: float = 0.0
    beams: int = 32
    min_elevation_deg: float = -25.0
    max_elevation_deg: float = -1.0
    azimuth_res_deg: float = 0.4
    range_max: float = 51.2
    ground_label: int = ROAD

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise InvalidParam("noise sigma must be >= 0")
        if self.beams < 1 or self.azimuth_res_deg <= 0:
            raise InvalidParam("ring pattern needs >= 1 beam and positive azimuth step")
        if not self.min_elevation_deg <= self.max_elevation_deg < 0:
            raise InvalidParam("beam elevations must be downward-looking")

    def ground_height(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.ground_z + math.tan(self.tilt[0]) * x + math.tan(self.tilt[1]) * y


def generate_scene(spec: SceneSpec, seed: int) -> PointCloud:
    """Sample a labelled scene: ground on concentric rings plus box obstacles.

    Ring radii follow the beam elevations of a sensor mounted ``-ground_z``
    above the ground, so point density falls off with range like a real
    spinning LiDAR.
    """
    rng = np.random.default_rng(seed)
    height = max(-spec.ground_z, 0.1)
    elev = np.deg2rad(np.linspace(spec.min_elevation_deg, spec.max_elevation_deg, spec.beams))
    radii = height / np.tan(-elev)
    az = np.deg2rad(np.arange(0.0, 360.0, spec.azimuth_res_deg))
    r, a = np.meshgrid(radii, az, indexing="ij")
    gx = (r * np.cos(a)).ravel()
    gy = (r * np.sin(a)).ravel()
    keep = np.ones(gx.shape, bool)
    for box in spec.obstacles:
        keep &= ~box.footprint_mask(gx, gy)
    gx, gy = gx[keep], gy[keep]
    gz = spec.ground_height(gx, gy)
    ground = np.column_stack([gx, gy, gz, rng.uniform(0.05, 0.35, gx.shape)])
    parts = [ground]
    labels = [np.full(len(ground), spec.ground_label, np.uint16)]

    for box in spec.obstacles:
        pts = _sample_box(spec, box, rng)
        parts.append(pts)
        labels.append(np.full(len(pts), box.label, np.uint16))

    pts = np.concatenate(parts)
    lab = np.concatenate(labels)
    if spec.noise_sigma > 0:
        pts[:, :3] += rng.normal(0.0, spec.noise_sigma, (len(pts), 3))
    inside = (np.abs(pts[:, 0]) < spec.range_max) & (np.abs(pts[:, 1]) < spec.range_max)
    return PointCloud(pts[inside].astype(np.float32), lab[inside])


def _sample_box(spec: SceneSpec, box: Box, rng: np.random.Generator) -> np.ndarray:
    (cx, cy), (ex, ey, ez) = box.center, box.extent
    base = float(spec.ground_height(np.array([cx]), np.array([cy]))[0])
    faces = [  # (area, sampler)
        (ex * ey, lambda n: np.column_stack([rng.uniform(-ex / 2, ex / 2, n), rng.uniform(-ey / 2, ey / 2, n), np.full(n, ez)])),
        (ex * ez, lambda n: np.column_stack([rng.uniform(-ex / 2, ex / 2, n), np.full(n, -ey / 2), rng.uniform(0, ez, n)])),
        (ex * ez, lambda n: np.column_stack([rng.uniform(-ex / 2, ex / 2, n), np.full(n, ey / 2), rng.uniform(0, ez, n)])),
        (ey * ez, lambda n: np.column_stack([np.full(n, -ex / 2), rng.uniform(-ey / 2, ey / 2, n), rng.uniform(0, ez, n)])),
        (ey * ez, lambda n: np.column_stack([np.full(n, ex / 2), rng.uniform(-ey / 2, ey / 2, n), rng.uniform(0, ez, n)])),
    ]
    out = []
    for area, sample in faces:
        n = max(1, int(round(area * box.density)))
        local = sample(n)
        out.append(local + np.array([cx, cy, base]))
    xyz = np.concatenate(out)
    inten = rng.uniform(0.3, 0.9, (len(xyz), 1))
    return np.hstack([xyz, inten])


def random_scene_spec(rng: np.random.Generator, n_obstacles: Sequence[int] = (3, 10),
                      tilted: bool | None = None, **overrides) -> SceneSpec:
    """Draw a flat or tilted scene with a random obstacle layout."""
    if tilted is None:
        tilted = bool(rng.integers(0, 2))
    tilt = tuple(rng.uniform(-0.05, 0.05, 2)) if tilted else (0.0, 0.0)
    boxes = []
    for _ in range(int(rng.integers(n_obstacles[0], n_obstacles[1] + 1))):
        r = rng.uniform(5.0, 35.0)
        a = rng.uniform(0, 2 * np.pi)
        extent = (rng.uniform(1.0, 4.5), rng.uniform(1.0, 2.5), rng.uniform(1.0, 2.5))
        label = int(rng.choice([CAR, BUILDING, POLE]))
        boxes.append(Box((r * np.cos(a), r * np.sin(a)), extent, label=label))
    return SceneSpec(tilt=tilt, obstacles=tuple(boxes), noise_sigma=0.02, **overrides)
