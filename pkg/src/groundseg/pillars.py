"""
Pillarization: bin points into a 2-D grid of vertical columns, cap each pillar
at a fixed point count and build the per-point augmented feature vector

    x, y, z, i, x_c, y_c, z_c, x_p, y_p, x_n, y_n, z_n

(raw point, offset from the pillar's point mean, offset from the pillar's
geometric centre, normal).  Rows index y and columns index x.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .errors import InvalidParam, MissingNormals, NoLabels, ShapeMismatch
from .lidar_io import GROUND_CLASSES, PointCloud

FEATURE_NAMES = ("x", "y", "z", "i", "x_c", "y_c", "z_c", "x_p", "y_p", "x_n", "y_n", "z_n")
UNSCORED = -1


@dataclass(frozen=True)
class GridConfig:
    x_range: tuple[float, float] = (-51.2, 51.2)
    y_range: tuple[float, float] = (-51.2, 51.2)
    z_range: tuple[float, float] = (-4.0, 4.0)
    pillar_size: float = 0.8
    max_points: int = 64

    def __post_init__(self):
        if self.max_points < 1:
            raise InvalidParam("max_points must be >= 1")
        if self.pillar_size <= 0:
            raise InvalidParam("pillar_size must be positive")
        for lo, hi in (self.x_range, self.y_range):
            n = (hi - lo) / self.pillar_size
            if hi <= lo or abs(n - round(n)) > 1e-9:
                raise InvalidParam(f"range [{lo}, {hi}] is not a whole number of pillars")

    @property
    def nx(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.pillar_size))

    @property
    def ny(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.pillar_size))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    def cell_of(self, x, y):
        """(row, col) of coordinates; no range check."""
        col = np.floor((np.asarray(x, np.float64) - self.x_range[0]) / self.pillar_size).astype(np.int64)
        row = np.floor((np.asarray(y, np.float64) - self.y_range[0]) / self.pillar_size).astype(np.int64)
        return np.clip(row, 0, self.ny - 1), np.clip(col, 0, self.nx - 1)

    def in_range(self, xyz: np.ndarray) -> np.ndarray:
        """Half-open [min, max) test, evaluated in the coordinates' own precision."""
        xyz = np.asarray(xyz)
        dt = xyz.dtype if xyz.dtype.kind == "f" else np.float64
        lo = np.array([self.x_range[0], self.y_range[0], self.z_range[0]], dtype=dt)
        hi = np.array([self.x_range[1], self.y_range[1], self.z_range[1]], dtype=dt)
        return ((xyz[:, :3] >= lo) & (xyz[:, :3] < hi)).all(axis=1)


@dataclass
class PillarBatch:
    """Dense pillar tensor for one or more frames.

    ``features`` is (P, max_points, F) with zero padding past ``counts``;
    ``coords`` is (P, 2) as (row, col); ``frame`` is (P,) frame index.
    """

    features: np.ndarray
    counts: np.ndarray
    coords: np.ndarray
    frame: np.ndarray
    n_frames: int = 1

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.features.shape[1])[None, :] < self.counts[:, None]

    @staticmethod
    def collate(batches: Iterable["PillarBatch"]) -> "PillarBatch":
        batches = list(batches)
        frames = []
        offset = 0
        for b in batches:
            frames.append(b.frame + offset)
            offset += b.n_frames
        return PillarBatch(
            np.concatenate([b.features for b in batches]),
            np.concatenate([b.counts for b in batches]),
            np.concatenate([b.coords for b in batches]),
            np.concatenate(frames),
            offset,
        )


@dataclass
class PillarGrid:
    cfg: GridConfig
    n_points: int
    point_pillar: np.ndarray  # (N,) pillar index of every point, -1 if out of range
    coords: np.ndarray  # (P, 2) occupied (row, col), sorted by flat index
    counts_precap: np.ndarray  # (P,)
    retained: np.ndarray  # (M,) original point index, grouped by pillar
    retained_pillar: np.ndarray  # (M,)
    features: np.ndarray  # (M, F) float64
    seed: int = 0

    @property
    def out_of_range(self) -> np.ndarray:
        return np.flatnonzero(self.point_pillar < 0)

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.retained_pillar, minlength=len(self.coords))

    @property
    def occupancy(self) -> np.ndarray:
        occ = np.zeros(self.cfg.shape, bool)
        occ[self.coords[:, 0], self.coords[:, 1]] = True
        return occ

    def pillar_points(self, p: int) -> np.ndarray:
        return self.features[self.retained_pillar == p]

    def to_batch(self, n_features: Optional[int] = None) -> PillarBatch:
        n_features = n_features or self.features.shape[1]
        counts = self.counts
        P, K = len(self.coords), self.cfg.max_points
        dense = np.zeros((P, K, n_features), np.float32)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        slot = np.arange(len(self.retained)) - starts[self.retained_pillar]
        dense[self.retained_pillar, slot] = self.features[:, :n_features]
        return PillarBatch(dense, counts.astype(np.int64), self.coords.astype(np.int64),
                           np.zeros(P, np.int64), 1)


def pillarize(cloud: PointCloud, normals: Optional[np.ndarray], cfg: GridConfig = GridConfig(),
              seed: int = 0, with_normals: bool = True) -> PillarGrid:
    """Bin ``cloud`` into pillars, cap at ``cfg.max_points`` and build features.

    Pillar means (x_c, y_c, z_c) are taken over the retained points only.
    With ``with_normals=False`` the feature vector stops at y_p (9 features).
    """
    n = len(cloud)
    if with_normals:
        if normals is None:
            raise MissingNormals("pillarize needs per-point normals")
        normals = np.asarray(normals, dtype=np.float64)
        if normals.shape != (n, 3):
            raise MissingNormals(f"normals shape {normals.shape} != ({n}, 3)")
    inside = cfg.in_range(cloud.points)
    pts = cloud.points.astype(np.float64)
    idx = np.flatnonzero(inside)
    row, col = cfg.cell_of(pts[idx, 0], pts[idx, 1])
    flat = row * cfg.nx + col

    occupied, pillar_of = np.unique(flat, return_inverse=True)
    point_pillar = np.full(n, -1, np.int64)
    point_pillar[idx] = pillar_of
    counts_precap = np.bincount(pillar_of, minlength=len(occupied))

    # seeded random cap: rank points inside each pillar by a random key
    rng = np.random.default_rng(seed)
    key = rng.random(len(idx))
    order = np.lexsort((key, pillar_of))
    starts = np.concatenate([[0], np.cumsum(counts_precap)[:-1]])
    rank = np.empty(len(idx), np.int64)
    rank[order] = np.arange(len(idx)) - starts[pillar_of[order]]
    keep = rank < cfg.max_points
    # group retained points by pillar, original order within each pillar
    kept_local = np.flatnonzero(keep)
    kept_local = kept_local[np.argsort(pillar_of[kept_local], kind="stable")]
    retained = idx[kept_local]
    retained_pillar = pillar_of[kept_local]

    xyz = pts[retained, :3]
    kept_counts = np.bincount(retained_pillar, minlength=len(occupied))
    sums = np.zeros((len(occupied), 3))
    np.add.at(sums, retained_pillar, xyz)
    mean = sums / np.maximum(kept_counts, 1)[:, None]
    centred = xyz - mean[retained_pillar]

    prow, pcol = occupied // cfg.nx, occupied % cfg.nx
    cx = cfg.x_range[0] + (pcol + 0.5) * cfg.pillar_size
    cy = cfg.y_range[0] + (prow + 0.5) * cfg.pillar_size
    off = np.column_stack([xyz[:, 0] - cx[retained_pillar], xyz[:, 1] - cy[retained_pillar]])

    cols = [pts[retained, :4], centred, off]
    if with_normals:
        cols.append(normals[retained])
    feats = np.hstack(cols)
    return PillarGrid(cfg, n, point_pillar, np.column_stack([prow, pcol]), counts_precap,
                      retained, retained_pillar, feats, seed)


@dataclass
class PillarLabels:
    labels: np.ndarray  # (H, W) uint8, 1 = ground
    ground_fraction: np.ndarray  # (H, W) float64, 0 for vacant pillars


def label_pillars(grid: PillarGrid, labels: Optional[np.ndarray],
                  ground_classes: Iterable[int] = GROUND_CLASSES,
                  threshold: float = 0.5) -> PillarLabels:
    """Pillar is ground iff at least ``threshold`` of its retained points are ground."""
    if labels is None:
        raise NoLabels("cloud carries no semantic labels")
    labels = np.asarray(labels)
    if len(labels) != grid.n_points:
        raise ShapeMismatch(f"{len(labels)} labels for {grid.n_points} points")
    is_ground = np.isin(labels[grid.retained], np.fromiter(ground_classes, np.int64))
    n = np.bincount(grid.retained_pillar, minlength=len(grid.coords))
    g = np.bincount(grid.retained_pillar, weights=is_ground, minlength=len(grid.coords))
    frac = np.zeros(grid.cfg.shape)
    frac[grid.coords[:, 0], grid.coords[:, 1]] = g / np.maximum(n, 1)
    lab = np.zeros(grid.cfg.shape, np.uint8)
    occ = grid.occupancy
    lab[occ & (frac >= threshold)] = 1
    return PillarLabels(lab, frac)


def propagate_to_points(pred: np.ndarray, grid: PillarGrid) -> np.ndarray:
    """Per-point labels from a pillar map; out-of-range points get ``UNSCORED``."""
    pred = np.asarray(pred)
    if pred.shape != grid.cfg.shape:
        raise ShapeMismatch(f"prediction map {pred.shape} != grid {grid.cfg.shape}")
    per_pillar = pred[grid.coords[:, 0], grid.coords[:, 1]].astype(np.int8)
    out = np.full(grid.n_points, UNSCORED, np.int8)
    inside = grid.point_pillar >= 0
    out[inside] = per_pillar[grid.point_pillar[inside]]
    return out


def point_ground_truth(labels: np.ndarray, grid: PillarGrid,
                       ground_classes: Iterable[int] = GROUND_CLASSES) -> np.ndarray:
    """Binary point truth with out-of-range points marked ``UNSCORED``."""
    truth = np.isin(np.asarray(labels), np.fromiter(ground_classes, np.int64)).astype(np.int8)
    truth[grid.point_pillar < 0] = UNSCORED
    return truth
