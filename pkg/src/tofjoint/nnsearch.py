"""Exact nearest-neighbor search over 3-D points.

The tree itself is scipy's median-split kd-tree (leaf size 16). On top of it
this module guarantees the contract the rest of the package relies on:

* squared distances are recomputed here as ``dx*dx + dy*dy + dz*dz`` so they are
  bit-identical to a brute-force scan using the same formula;
* among equidistant candidates the smallest point id wins.

The tree returns two candidates per query; when the second is not clearly
farther than the first, the tie may extend past them and that query falls
back to an exhaustive scan.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractViolation
from .geometry import PointCloud

LEAF_SIZE = 16

# Worker threads for batched queries (-1 = all cores). Results do not depend on it.
workers = 1


def squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


class PointIndex:
    """Immutable kd-tree over a non-empty point set."""

    def __init__(self, cloud):
        points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
        points = np.array(points, dtype=np.float64).reshape(-1, 3)
        if len(points) == 0:
            raise ContractViolation("cannot build an index over an empty cloud")
        if not np.isfinite(points).all():
            raise ContractViolation("indexed points must be finite")
        points.setflags(write=False)
        self._points = points
        self._tree = cKDTree(points, leafsize=LEAF_SIZE, balanced_tree=True, compact_nodes=True)

    @property
    def size(self) -> int:
        return len(self._points)

    def __len__(self) -> int:
        return self.size

    @property
    def points(self) -> np.ndarray:
        return self._points

    def nearest(self, query) -> tuple[int, float]:
        ids, d2 = self.nearest_batch(np.asarray(query, dtype=np.float64).reshape(1, 3))
        return int(ids[0]), float(d2[0])

    def nearest_batch(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Nearest point id and squared distance (mm^2) for each query row."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if len(q) == 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        if self.size == 1:
            return np.zeros(len(q), dtype=np.int64), squared_distances(q, self._points[0])
        _, cand = self._tree.query(q, k=2, workers=workers)
        a, b = cand[:, 0].astype(np.int64), cand[:, 1].astype(np.int64)
        da = squared_distances(q, self._points[a])
        db = squared_distances(q, self._points[b])
        take_b = (db < da) | ((db == da) & (b < a))
        best = np.where(take_b, b, a)
        best_d2 = np.where(take_b, db, da)

        if self.size > 2:
            # the tree ranks with its own rounding; a near-tie at the second
            # candidate may hide further equidistant points
            unsure = np.flatnonzero(np.maximum(da, db) <= best_d2 * (1 + 1e-9) + 1e-300)
            for i in unsure:
                all_d2 = squared_distances(q[i], self._points)
                j = int(np.argmin(all_d2))  # first minimum = smallest id
                best[i], best_d2[i] = j, all_d2[j]
        return best, best_d2


def build(cloud) -> PointIndex:
    return PointIndex(cloud)


def nearest(index: PointIndex, query) -> tuple[int, float]:
    return index.nearest(query)


def brute_force_nearest(points: np.ndarray, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exhaustive O(N*M) reference used by the test suite."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    ids = np.empty(len(queries), dtype=np.int64)
    d2 = np.empty(len(queries))
    for i, qq in enumerate(queries):
        all_d2 = squared_distances(qq, points)
        ids[i] = int(np.argmin(all_d2))
        d2[i] = all_d2[ids[i]]
    return ids, d2
