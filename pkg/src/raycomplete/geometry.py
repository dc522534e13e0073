"""Core value types and the geometric formulas of the completion basis.

A partial scan seen from a known camera position defines one ray per observed
point (direction = point - camera, deliberately un-normalized).  Completion
candidates are produced by sliding duplicated points along those rays into the
region shadowed by the scan, then nudging them inside small per-point boxes
whose size is derived from how far each point travelled.

Conventions: points are float64 arrays of shape (3,), clouds are (N, 3).
Clouds are expected to be normalized into the centered unit cube
[-0.5, 0.5]^3 before any offsets or constraint values are interpreted; the
absolute constants below (DEFAULT_CONSTRAINT_BASE in particular) only make
sense in those units.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateRay, NegativeOffset, ShapeMismatch

# Direction lengths below this are treated as a point sitting on the camera.
DEGENERATE_RAY_EPS = 1e-12

# Defaults for the per-point movement budget during refinement.
DEFAULT_CONSTRAINT_ALPHA = 1.5
DEFAULT_CONSTRAINT_BASE = 0.03

# Numerical slack absorbed by the candidate-volume membership test so that
# points constructed exactly on a ray pass even at zero angular tolerance.
_ANGLE_SLACK = 1e-7
_DIST_SLACK = 1e-9


def as_point(p) -> np.ndarray:
    """Coerce to a finite float64 vector of shape (3,)."""
    arr = np.asarray(p, dtype=np.float64)
    if arr.shape != (3,):
        raise ShapeMismatch(f"expected a 3-vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("point has non-finite coordinates")
    return arr


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class PointCloud:
    """Ordered, immutable set of 3D points backed by an (N, 3) float64 array."""

    points: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.points, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ShapeMismatch(f"cloud must have shape (N, 3), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("cloud contains non-finite coordinates")
        object.__setattr__(self, "points", _freeze(arr))

    @property
    def count(self) -> int:
        return self.points.shape[0]

    def __len__(self) -> int:
        return self.count

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned (min, max) corners; raises on an empty cloud."""
        if self.count == 0:
            raise ValueError("empty cloud has no bounds")
        return self.points.min(axis=0), self.points.max(axis=0)


@dataclass(frozen=True)
class RayBundle:
    """Camera position plus one un-normalized ray per observed point.

    directions[i] = origins[i] - cam, so origins[i] reconstructs as
    cam + directions[i] (exact up to one rounding of the subtraction).
    """

    cam: np.ndarray
    origins: PointCloud
    directions: np.ndarray

    def __post_init__(self):
        cam = as_point(self.cam)
        dirs = np.asarray(self.directions, dtype=np.float64)
        if dirs.shape != (self.origins.count, 3):
            raise ShapeMismatch(
                f"directions shape {dirs.shape} does not match {self.origins.count} origins"
            )
        lengths = np.linalg.norm(dirs, axis=1)
        if self.origins.count and lengths.min(initial=np.inf) < DEGENERATE_RAY_EPS:
            raise DegenerateRay("a ray direction has (near-)zero length")
        if not np.allclose(cam + dirs, self.origins.points, rtol=0.0, atol=1e-12):
            raise ValueError("directions do not reconstruct the origins from cam")
        object.__setattr__(self, "cam", _freeze(cam))
        object.__setattr__(self, "directions", _freeze(dirs))

    @property
    def count(self) -> int:
        return self.origins.count


@dataclass(frozen=True)
class ShadowVolume:
    """Approximate membership test for the region shadowed by a scan.

    Membership is per-ray: a query point belongs to the candidate volume when
    it lies within ``angular_tolerance`` radians of some ray and at least as
    far from the camera as that ray's observed point.  This is a conservative
    cone test, not an exact polyhedral construction.
    """

    rays: RayBundle
    angular_tolerance: float = 0.01

    def __post_init__(self):
        if not self.angular_tolerance >= 0.0:
            raise ValueError("angular_tolerance must be >= 0")


@dataclass(frozen=True)
class OffsetConstraint:
    """Parameters of the per-point movement budget used during refinement."""

    alpha: float = DEFAULT_CONSTRAINT_ALPHA
    base: float = DEFAULT_CONSTRAINT_BASE
    layer_count: int = 2

    def __post_init__(self):
        if not self.alpha > 1.0:
            raise ValueError("alpha must be > 1")
        if not self.base > 0.0:
            raise ValueError("base must be > 0")
        if self.layer_count < 1:
            raise ValueError("layer_count must be >= 1")


def build_rays(cam, scan: PointCloud) -> RayBundle:
    """One ray per scan point: direction = point - cam, kept un-normalized.

    Raises DegenerateRay if any scan point coincides with the camera.
    """
    cam = as_point(cam)
    dirs = scan.points - cam
    if scan.count:
        lengths = np.linalg.norm(dirs, axis=1)
        if lengths.min() < DEGENERATE_RAY_EPS:
            bad = int(np.argmin(lengths))
            raise DegenerateRay(f"scan point {bad} coincides with the camera")
    return RayBundle(cam=cam, origins=scan, directions=dirs)


def displace_along_rays(rays: RayBundle, offsets: np.ndarray) -> PointCloud:
    """Slide L duplicated copies of each scan point along its ray.

    ``offsets`` is (N, L) with non-negative entries; output point i*L + l is
    origins[i] + offsets[i, l] * directions[i].  Offsets scale the
    un-normalized direction, so the ray parameter of every output is
    1 + offset >= 1: all generated points sit on or behind the observed
    surface as seen from the camera.
    """
    off = np.asarray(offsets, dtype=np.float64)
    if off.ndim != 2 or off.shape[0] != rays.count:
        raise ShapeMismatch(
            f"offsets shape {off.shape} does not match {rays.count} rays"
        )
    if off.size and off.min() < 0.0:
        raise NegativeOffset("offsets must be non-negative")
    n, L = off.shape
    base = np.repeat(rays.origins.points, L, axis=0)
    dirs = np.repeat(rays.directions, L, axis=0)
    out = base + off.reshape(n * L, 1) * dirs
    return PointCloud(out)


def constraint_value(constraint: OffsetConstraint, offset_total: float, layer: int) -> float:
    """Movement budget for a point that travelled ``offset_total`` along its ray.

    Value = (offset_total / 2 + base) / alpha**(layer - 1): grows with the
    travelled offset, shrinks geometrically with the refinement layer.  Points
    that never left the observed surface keep the small ``base`` budget, which
    is what preserves scanned detail through refinement.
    """
    if not 1 <= layer <= constraint.layer_count:
        raise ValueError(f"layer {layer} outside 1..{constraint.layer_count}")
    if offset_total < 0.0:
        raise NegativeOffset("offset_total must be non-negative")
    return (offset_total / 2.0 + constraint.base) / constraint.alpha ** (layer - 1)


def constraint_values(constraint: OffsetConstraint, offset_totals: np.ndarray, layer: int) -> np.ndarray:
    """Vectorized ``constraint_value`` over an array of offset totals."""
    totals = np.asarray(offset_totals, dtype=np.float64)
    if totals.size and totals.min() < 0.0:
        raise NegativeOffset("offset totals must be non-negative")
    if not 1 <= layer <= constraint.layer_count:
        raise ValueError(f"layer {layer} outside 1..{constraint.layer_count}")
    return (totals / 2.0 + constraint.base) / constraint.alpha ** (layer - 1)


def apply_local_displacements(
    parents: PointCloud, raw_moves: np.ndarray, bounds: np.ndarray
) -> PointCloud:
    """Spread each parent into K children inside a per-parent box.

    ``raw_moves`` is (M, K, 3) with components in [-1, 1] (squashed upstream);
    ``bounds`` is (M,) positive.  Child (j, k) = parent j + bounds[j] *
    raw_moves[j, k], so no child leaves its parent's per-dimension box.
    """
    moves = np.asarray(raw_moves, dtype=np.float64)
    b = np.asarray(bounds, dtype=np.float64)
    m = parents.count
    if moves.ndim != 3 or moves.shape[0] != m or moves.shape[2] != 3:
        raise ShapeMismatch(
            f"raw_moves shape {moves.shape} does not match {m} parents"
        )
    if b.shape != (m,):
        raise ShapeMismatch(f"bounds shape {b.shape} does not match {m} parents")
    if m and b.min() <= 0.0:
        raise ValueError("bounds must be strictly positive")
    k = moves.shape[1]
    children = parents.points[:, None, :] + b[:, None, None] * moves
    return PointCloud(children.reshape(m * k, 3))


def in_candidate_volume(vol: ShadowVolume, q) -> bool:
    """True when q is at least as far as, and angularly aligned with, some ray.

    A small internal slack on both the angle and the distance comparison
    absorbs floating-point error, so points generated exactly on a ray are
    members even at zero tolerance.
    """
    q = as_point(q)
    rays = vol.rays
    if rays.count == 0:
        return False
    v = q - rays.cam
    vnorm = float(np.linalg.norm(v))
    dir_norms = np.linalg.norm(rays.directions, axis=1)
    if vnorm < DEGENERATE_RAY_EPS:
        # Query sits on the camera: nearer than every observed point.
        return False
    cos = (rays.directions @ v) / (dir_norms * vnorm)
    angles = np.arccos(np.clip(cos, -1.0, 1.0))
    behind = vnorm >= dir_norms - _DIST_SLACK
    aligned = angles <= vol.angular_tolerance + _ANGLE_SLACK
    return bool(np.any(aligned & behind))
