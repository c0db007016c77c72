"""
Distribution-controlled undersampling.

The x-y plane is cut into square rings ("sections") of width ``d`` around the
sensor.  Each section gets a weight ``s_j = 2 * max(Sec) - Sec_j`` so sparse
(far) rings are favoured; the weights are turned into keep-probabilities
``p_j = min(1, lam * s_j)`` with ``lam`` solved so the expected kept count
equals the budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyHistogram, InvalidParam
from .lidar_io import PointCloud


@dataclass
class SectionHistogram:
    d: float
    counts: np.ndarray  # (m,) int64
    section: np.ndarray  # (N,) section index per point, -1 when out of range

    @property
    def excluded(self) -> int:
        return int((self.section < 0).sum())

    def __len__(self) -> int:
        return len(self.counts)


def _xy(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points[:, :2].astype(np.float64)
    return np.asarray(cloud, dtype=np.float64)[:, :2]


def build_sections(cloud, d: float = 0.8, range_max: float = 51.2) -> SectionHistogram:
    if d <= 0 or range_max <= 0:
        raise InvalidParam(f"need d > 0 and range_max > 0, got d={d}, range_max={range_max}")
    xy = _xy(cloud)
    m = max(1, math.ceil(range_max / d - 1e-9))
    cheb = np.abs(xy).max(axis=1) if len(xy) else np.zeros(0)
    j = np.floor(cheb / d).astype(np.int64)
    j = np.minimum(j, m - 1)
    j[cheb >= range_max] = -1
    counts = np.bincount(j[j >= 0], minlength=m).astype(np.int64)
    return SectionHistogram(d, counts, j)


def section_weights(hist: SectionHistogram | np.ndarray) -> np.ndarray:
    counts = hist.counts if isinstance(hist, SectionHistogram) else np.asarray(hist)
    if counts.size == 0 or counts.max() <= 0:
        raise EmptyHistogram("histogram has no points")
    return 2 * counts.max() - counts


def keep_probabilities(counts: np.ndarray, weights: np.ndarray, budget: float,
                       iters: int = 200) -> np.ndarray:
    """Waterfill ``p_j = min(1, lam * s_j)`` so that ``sum p_j * Sec_j == budget``."""
    counts = np.asarray(counts, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if budget >= counts.sum():
        return np.ones_like(counts)
    occupied = counts > 0
    lo, hi = 0.0, 1.0 / weights[occupied].min()

    def kept(lam):
        return (np.minimum(1.0, lam * weights) * counts).sum()

    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if kept(mid) < budget:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-17 * hi:
            break
    return np.minimum(1.0, 0.5 * (lo + hi) * weights)


def keep_counts(counts: np.ndarray, probs: np.ndarray, budget: int) -> np.ndarray:
    """Integer per-section keep counts summing to ``budget`` (largest remainder)."""
    counts = np.asarray(counts, dtype=np.int64)
    target = np.minimum(probs * counts, counts)
    base = np.floor(target).astype(np.int64)
    short = int(min(budget, counts.sum()) - base.sum())
    if short > 0:
        frac = target - base
        frac[base >= counts] = -1.0
        # stable: ties go to the lower section index
        order = np.argsort(-frac, kind="stable")
        base[order[:short]] += 1
    return base


def undersample(cloud: PointCloud, budget: int, d: float = 0.8, seed: int = 0,
                range_max: float = 51.2) -> PointCloud:
    if budget <= 0:
        raise InvalidParam("budget must be positive")
    if len(cloud) <= budget:
        return cloud
    hist = build_sections(cloud, d, range_max)
    if hist.counts.sum() == 0:
        return cloud.subset(np.zeros(0, np.int64))
    probs = keep_probabilities(hist.counts, section_weights(hist), budget)
    per_section = keep_counts(hist.counts, probs, budget)

    rng = np.random.default_rng(seed)
    order = np.argsort(hist.section, kind="stable")
    sorted_sec = hist.section[order]
    starts = np.searchsorted(sorted_sec, np.arange(len(hist.counts)))
    kept = []
    for j, n_keep in enumerate(per_section):
        if n_keep == 0:
            continue
        members = order[starts[j]:starts[j] + hist.counts[j]]
        kept.append(members if n_keep >= len(members) else rng.choice(members, n_keep, replace=False))
    idx = np.sort(np.concatenate(kept)) if kept else np.zeros(0, np.int64)
    return cloud.subset(idx)


def undersample_uniform(cloud: PointCloud, budget: int, seed: int = 0) -> PointCloud:
    if budget <= 0:
        raise InvalidParam("budget must be positive")
    if len(cloud) <= budget:
        return cloud
    rng = np.random.default_rng(seed)
    return cloud.subset(np.sort(rng.choice(len(cloud), budget, replace=False)))
