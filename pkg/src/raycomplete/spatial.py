"""Nearest-neighbor index, radius queries, and farthest point sampling.

The index wraps a k-d tree for speed but guarantees brute-force semantics:
every query returns exactly what an O(n) linear scan over the source points
would return, including ties broken by lowest point id and squared distances
computed with plain ``((p - q) ** 2).sum()`` arithmetic.  Near-ties reported
by the tree are re-resolved against that arithmetic so the guarantee holds
bitwise, not just approximately.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCloud
from .geometry import PointCloud, as_point

# Tree distances this close are re-checked with linear-scan arithmetic.
_TIE_EPS = 1e-9


@dataclass(frozen=True)
class SpatialIndex:
    """Immutable nearest-neighbor index over a non-empty point cloud."""

    source: PointCloud
    tree: cKDTree = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.source.count == 0:
            raise EmptyCloud("cannot index an empty cloud")
        object.__setattr__(self, "tree", cKDTree(self.source.points))

    @property
    def count(self) -> int:
        return self.source.count


def _exact_sq_dists(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    # The reference arithmetic every query result must agree with.
    return ((points - q) ** 2).sum(axis=1)


def _resolve_tie(index: SpatialIndex, q: np.ndarray, d0: float) -> int:
    # All true contenders lie within d0 plus slack; re-rank them exactly.
    cand = index.tree.query_ball_point(q, d0 + 2.0 * _TIE_EPS)
    cand = np.sort(np.asarray(cand, dtype=np.int64))
    sq = _exact_sq_dists(index.source.points[cand], q)
    return int(cand[int(np.argmin(sq))])


def nearest(index: SpatialIndex, q) -> tuple[int, float]:
    """Id and squared distance of the closest source point to q.

    Ties are broken by lowest id; the squared distance matches a linear
    scan bit for bit.
    """
    ids, sq = nearest_batch(index, np.asarray(q, dtype=np.float64).reshape(1, 3))
    return int(ids[0]), float(sq[0])


def nearest_batch(index: SpatialIndex, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``nearest`` over an (M, 3) query array."""
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != 3:
        raise ValueError(f"queries must have shape (M, 3), got {q.shape}")
    if q.shape[0] == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    d, i = index.tree.query(q, k=2)
    ids = i[:, 0].astype(np.int64)
    # Missing second neighbor (single-point cloud) comes back as inf: no tie.
    close = (d[:, 1] - d[:, 0]) <= _TIE_EPS
    for row in np.nonzero(close)[0]:
        ids[row] = _resolve_tie(index, q[row], float(d[row, 0]))
    pts = index.source.points
    sq = ((pts[ids] - q) ** 2).sum(axis=1)
    return ids, sq


def within_radius(index: SpatialIndex, q, r: float) -> np.ndarray:
    """Sorted ids of all source points with distance <= r (boundary inclusive)."""
    if not r > 0.0:
        raise ValueError("radius must be > 0")
    q = as_point(q)
    # Over-collect, then keep exactly the ids the linear scan would keep.
    cand = index.tree.query_ball_point(q, r + _TIE_EPS)
    cand = np.sort(np.asarray(cand, dtype=np.int64))
    if cand.size == 0:
        return cand
    sq = _exact_sq_dists(index.source.points[cand], q)
    return cand[sq <= r * r]


def farthest_point_sample(cloud: PointCloud, k: int, seed_id: int = 0) -> np.ndarray:
    """Greedy subset of k ids spreading points as far apart as possible.

    Starts at seed_id, then repeatedly appends the point whose minimum
    squared distance to the already-selected set is largest, ties by lowest
    id.  If k >= count the full identity selection 0..count-1 is returned.
    """
    n = cloud.count
    if n == 0:
        raise EmptyCloud("cannot sample from an empty cloud")
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0 <= seed_id < n:
        raise ValueError(f"seed_id {seed_id} outside 0..{n - 1}")
    if k >= n:
        return np.arange(n, dtype=np.int64)
    pts = cloud.points
    selected = np.empty(k, dtype=np.int64)
    selected[0] = seed_id
    dist2 = _exact_sq_dists(pts, pts[seed_id])
    # Mark selected ids below any real distance so duplicates of an already
    # selected point can never win the argmax.
    dist2[seed_id] = -1.0
    for step in range(1, k):
        nxt = int(np.argmax(dist2))
        selected[step] = nxt
        np.minimum(dist2, _exact_sq_dists(pts, pts[nxt]), out=dist2)
        dist2[nxt] = -1.0
    return selected
