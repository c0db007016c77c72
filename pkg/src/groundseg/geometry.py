"""
k-nearest-neighbour search and per-point normals from least-squares plane fits.

For each point the k nearest neighbours (the point itself included) are fitted
with ``z = alpha * x + beta * y + gamma``.  The normal is ``V / |V|`` with
``V = [alpha, beta, 1]`` as printed in GSECnet's augmentation step; the
geometric normal ``[-alpha, -beta, 1]`` is available via ``corrected_sign``.
Both share the z component, which is what separates ground from clutter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateFit, EmptyCloud, InvalidParam, TooFewPoints
from .lidar_io import PointCloud

DEFAULT_K = 30
COND_LIMIT = 1e12
DET_LIMIT = 1e-12


class KdTree:
    """Immutable spatial index; ties in distance are broken by ascending index."""

    def __init__(self, xyz: np.ndarray, leafsize: int = 16):
        self.data = np.ascontiguousarray(xyz, dtype=np.float64)
        if self.data.ndim != 2 or len(self.data) == 0:
            raise EmptyCloud("cannot index an empty cloud")
        self._tree = cKDTree(self.data, leafsize=leafsize, balanced_tree=True, compact_nodes=True)

    def __len__(self) -> int:
        return len(self.data)

    def query(self, query, k: int) -> np.ndarray:
        if k < 1:
            raise InvalidParam(f"k must be >= 1, got {k}")
        q = np.asarray(query, dtype=np.float64)[:3]
        k = min(k, len(self.data))
        dist, _ = self._tree.query(q, k=k)
        radius = float(np.atleast_1d(dist)[-1])
        # the ball query catches every point tied with the k-th distance
        cand = np.asarray(self._tree.query_ball_point(q, radius * (1 + 1e-9) + 1e-12), dtype=np.int64)
        d2 = ((self.data[cand] - q) ** 2).sum(axis=1)
        order = np.lexsort((cand, d2))
        return cand[order[:k]]

    def query_batch(self, queries: np.ndarray, k: int) -> np.ndarray:
        """Bulk k-NN; (M, k) indices in ascending distance (ties unresolved)."""
        if k < 1:
            raise InvalidParam(f"k must be >= 1, got {k}")
        k = min(k, len(self.data))
        _, idx = self._tree.query(np.asarray(queries, dtype=np.float64), k=k)
        return np.asarray(idx).reshape(len(queries), k)


def _coords(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.xyz
    return np.asarray(cloud)[:, :3]


def build_kdtree(cloud, leafsize: int = 16) -> KdTree:
    return KdTree(_coords(cloud), leafsize)


def knn(tree: KdTree, query, k: int) -> np.ndarray:
    return tree.query(query, k)


def _fit_centered(nb: np.ndarray):
    """Batched normal-equation solve on mean-centred neighbourhoods.

    ``nb`` is (M, k, 3).  Returns (coef (M, 3), degenerate mask (M,)).
    """
    mean = nb.mean(axis=1, keepdims=True)
    c = nb - mean
    x, y, z = c[..., 0], c[..., 1], c[..., 2]
    k = nb.shape[1]
    # X^T X for columns (x, y, 1) after centring: the constant column decouples
    sxx, sxy, syy = (x * x).sum(1), (x * y).sum(1), (y * y).sum(1)
    sxz, syz = (x * z).sum(1), (y * z).sum(1)
    det2 = sxx * syy - sxy * sxy
    det = det2 * k
    tr = sxx + syy
    # condition number of the symmetric 2x2 block, bounded by the k entry
    disc = np.sqrt(np.maximum((sxx - syy) ** 2 / 4 + sxy ** 2, 0.0))
    lmax = np.maximum(tr / 2 + disc, k)
    lmin = np.minimum(tr / 2 - disc, k)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(lmin > 0, lmax / lmin, np.inf)
        degenerate = (np.abs(det) < DET_LIMIT) | (cond > COND_LIMIT) | ~np.isfinite(cond)
        safe = np.where(degenerate, 1.0, det2)
        alpha = (syy * sxz - sxy * syz) / safe
        beta = (sxx * syz - sxy * sxz) / safe
    mx, my, mz = mean[:, 0, 0], mean[:, 0, 1], mean[:, 0, 2]
    gamma = mz - alpha * mx - beta * my
    coef = np.column_stack([alpha, beta, gamma])
    coef[degenerate] = np.nan
    return coef, degenerate


def plane_fit(neighbors) -> tuple[float, float, float]:
    """Least-squares ``z = alpha*x + beta*y + gamma`` over a neighbourhood."""
    nb = np.asarray(neighbors, dtype=np.float64)[:, :3]
    if len(nb) < 3:
        raise TooFewPoints(f"plane fit needs >= 3 points, got {len(nb)}")
    coef, degenerate = _fit_centered(nb[None])
    if degenerate[0]:
        raise DegenerateFit("neighbourhood is vertical or collinear")
    return tuple(float(v) for v in coef[0])


@dataclass
class NormalEstimate:
    normals: np.ndarray  # (N, 3) float64, unit length, nz > 0
    fallbacks: int


def estimate_normals(cloud, k: int = DEFAULT_K, corrected_sign: bool = False,
                     tree: KdTree | None = None, chunk: int = 65536) -> NormalEstimate:
    xyz = np.asarray(_coords(cloud), dtype=np.float64)
    if len(xyz) == 0:
        raise EmptyCloud("no points")
    if k < 3:
        raise InvalidParam("normal estimation needs k >= 3")
    tree = tree or KdTree(xyz)
    out = np.empty((len(xyz), 3))
    fallbacks = 0
    for lo in range(0, len(xyz), chunk):
        idx = tree.query_batch(xyz[lo:lo + chunk], k)
        if idx.shape[1] < 3:
            coef = np.full((len(idx), 3), np.nan)
            bad = np.ones(len(idx), bool)
        else:
            coef, bad = _fit_centered(xyz[idx])
        sign = -1.0 if corrected_sign else 1.0
        v = np.column_stack([sign * coef[:, 0], sign * coef[:, 1], np.ones(len(idx))])
        v[bad] = (0.0, 0.0, 1.0)
        out[lo:lo + chunk] = v / np.linalg.norm(v, axis=1, keepdims=True)
        fallbacks += int(bad.sum())
    return NormalEstimate(out, fallbacks)
