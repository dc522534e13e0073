"""Synthetic dataset production: shapes, scans, GT tiers, file I/O.

Shapes are parametric primitives and small composites (a lamp made of
stacked cylinders, a chair made of boxes) chosen to create holes and
concave pockets.  Surfaces are sampled uniformly by area, posed, and
normalized into the centered unit cube using analytic bounding boxes, so
the normalization never depends on which points happened to be drawn.

A single-view scan is simulated with an angular z-buffer: directions from
the camera are binned in (azimuth, elevation) over an adaptive window, and
only the nearest point per bin survives.  The camera pose is recorded with
every pair; ground truth comes as three independently sampled tiers of
increasing resolution.

Everything is deterministic given seeds, including the files on disk.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (
    CameraInside,
    DatasetEmpty,
    DegenerateScan,
    ParseError,
    UnsupportedFormat,
)
from .geometry import PointCloud, as_point
from .spatial import farthest_point_sample

FAMILIES = ("sphere", "box", "cylinder", "lamp", "chair")

CAMERA_RADIUS = 1.5
DENSE_FACTOR = 64          # dense-cloud size per requested partial point
CAMERA_ATTEMPTS = 16       # re-samples before giving up on a shape
_NORM_MARGIN = 1e-9

_PARAM_COUNTS = {"sphere": 1, "box": 3, "cylinder": 2, "lamp": 6, "chair": 7}


# ---------------------------------------------------------------------------
# shape specifications
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ShapeSpec:
    """One synthetic shape: family, dimensions, pose, and sampling seed."""

    family: str
    params: tuple[float, ...]
    pose_quat: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    pose_scale: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        params = tuple(float(p) for p in self.params)
        if len(params) != _PARAM_COUNTS[self.family]:
            raise ValueError(
                f"{self.family} takes {_PARAM_COUNTS[self.family]} params, got {len(params)}"
            )
        if any(p <= 0.0 for p in params):
            raise ValueError("shape dimensions must be positive")
        if not self.pose_scale > 0.0:
            raise ValueError("pose_scale must be positive")
        q = np.asarray(self.pose_quat, dtype=np.float64)
        if q.shape != (4,) or np.linalg.norm(q) < 1e-12:
            raise ValueError("pose_quat must be a non-zero 4-vector")
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "pose_quat", tuple(float(v) for v in q))


def random_spec(family: str, seed: int) -> ShapeSpec:
    """Randomized dimensions and pose for a family, deterministic in seed."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 17)))
    if family == "sphere":
        params = (rng.uniform(0.3, 0.5),)
    elif family == "box":
        params = tuple(rng.uniform(0.15, 0.5, size=3))
    elif family == "cylinder":
        params = (rng.uniform(0.15, 0.4), rng.uniform(0.2, 0.5))
    elif family == "lamp":
        params = (
            rng.uniform(0.15, 0.3),    # base radius
            rng.uniform(0.03, 0.07),   # base half-height
            rng.uniform(0.02, 0.05),   # pole radius
            rng.uniform(0.15, 0.3),    # pole half-height
            rng.uniform(0.12, 0.25),   # shade radius
            rng.uniform(0.08, 0.18),   # shade half-height
        )
    elif family == "chair":
        params = (
            rng.uniform(0.18, 0.3),    # seat half-width
            rng.uniform(0.18, 0.3),    # seat half-depth
            rng.uniform(0.02, 0.05),   # seat half-thickness
            rng.uniform(0.15, 0.3),    # backrest half-height
            rng.uniform(0.02, 0.04),   # backrest half-thickness
            rng.uniform(0.12, 0.25),   # panel half-height
            rng.uniform(0.02, 0.04),   # panel half-thickness
        )
    else:
        raise ValueError(f"unknown family {family!r}")
    quat = rng.normal(size=4)
    quat /= np.linalg.norm(quat)
    return ShapeSpec(
        family=family,
        params=params,
        pose_quat=tuple(quat),
        pose_scale=float(rng.uniform(0.9, 1.1)),
        rng_seed=seed,
    )


def _quat_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


# Parts live in the composite's canonical frame: axis-aligned primitives at
# translated centers.  kind: "sphere" | "box" | "cyl"; caps only for cyl.
@dataclass(frozen=True)
class _Part:
    kind: str
    center: tuple[float, float, float]
    dims: tuple[float, ...]
    caps: tuple[bool, bool] = (True, True)


def _parts(spec: ShapeSpec) -> list[_Part]:
    p = spec.params
    if spec.family == "sphere":
        return [_Part("sphere", (0, 0, 0), (p[0],))]
    if spec.family == "box":
        return [_Part("box", (0, 0, 0), p)]
    if spec.family == "cylinder":
        return [_Part("cyl", (0, 0, 0), p)]
    if spec.family == "lamp":
        br, bh, pr, ph, sr, sh = p
        return [
            _Part("cyl", (0, 0, bh), (br, bh)),
            _Part("cyl", (0, 0, 2 * bh + ph), (pr, ph), caps=(False, False)),
            # Shade is open at the bottom: a concave pocket over the pole.
            _Part("cyl", (0, 0, 2 * bh + 2 * ph + sh), (sr, sh), caps=(False, True)),
        ]
    sx, sy, st, bh, bt, ph, pt = p
    return [
        _Part("box", (0, 0, 0), (sx, sy, st)),
        _Part("box", (0, -(sy - bt), st + bh), (sx, bt, bh)),
        _Part("box", (-(sx - pt), 0, -(st + ph)), (pt, sy, ph)),
        _Part("box", (sx - pt, 0, -(st + ph)), (pt, sy, ph)),
    ]


def _patches(part: _Part):
    # Yields (area, sampler) pairs; samplers map an rng and count to points
    # in the canonical frame.
    c = np.asarray(part.center, dtype=np.float64)
    if part.kind == "sphere":
        (r,) = part.dims

        def sphere_sampler(rng, k):
            v = rng.normal(size=(k, 3))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            return c + r * v

        yield 4.0 * math.pi * r * r, sphere_sampler
        return
    if part.kind == "box":
        h = np.asarray(part.dims, dtype=np.float64)
        for axis in range(3):
            b, cc = (axis + 1) % 3, (axis + 2) % 3
            area = 4.0 * h[b] * h[cc]
            for sign in (-1.0, 1.0):

                def face_sampler(rng, k, axis=axis, b=b, cc=cc, sign=sign):
                    pts = np.empty((k, 3))
                    pts[:, axis] = sign * h[axis]
                    pts[:, b] = rng.uniform(-h[b], h[b], size=k)
                    pts[:, cc] = rng.uniform(-h[cc], h[cc], size=k)
                    return c + pts

                yield area, face_sampler
        return
    r, hh = part.dims

    def side_sampler(rng, k):
        theta = rng.uniform(0.0, 2.0 * math.pi, size=k)
        z = rng.uniform(-hh, hh, size=k)
        return c + np.column_stack([r * np.cos(theta), r * np.sin(theta), z])

    yield 2.0 * math.pi * r * 2.0 * hh, side_sampler
    for present, sign in zip(part.caps, (-1.0, 1.0)):
        if not present:
            continue

        def cap_sampler(rng, k, sign=sign):
            theta = rng.uniform(0.0, 2.0 * math.pi, size=k)
            rho = r * np.sqrt(rng.uniform(0.0, 1.0, size=k))
            return c + np.column_stack(
                [rho * np.cos(theta), rho * np.sin(theta), np.full(k, sign * hh)]
            )

        yield math.pi * r * r, cap_sampler


def _part_aabb(part: _Part, rot: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = rot @ np.asarray(part.center, dtype=np.float64)
    if part.kind == "sphere":
        e = np.full(3, part.dims[0])
    elif part.kind == "box":
        e = np.abs(rot) @ np.asarray(part.dims, dtype=np.float64)
    else:
        r, hh = part.dims
        axis = rot[:, 2]
        e = hh * np.abs(axis) + r * np.sqrt(np.maximum(0.0, 1.0 - axis * axis))
    return c - e, c + e


def _normalization(spec: ShapeSpec) -> tuple[np.ndarray, np.ndarray, float]:
    """Rotation, posed-frame AABB center, and scale into the unit cube."""
    rot = _quat_matrix(spec.pose_quat)
    los, his = zip(*(_part_aabb(part, rot) for part in _parts(spec)))
    lo = np.min(los, axis=0) * spec.pose_scale
    hi = np.max(his, axis=0) * spec.pose_scale
    extent = float(np.max(hi - lo))
    return rot, (lo + hi) / 2.0, (1.0 - _NORM_MARGIN) / extent


def sample_surface(spec: ShapeSpec, n: int) -> PointCloud:
    """n points uniform by area on the posed, unit-cube-normalized surface."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence((spec.rng_seed, 29)))
    areas, samplers = [], []
    for part in _parts(spec):
        for area, sampler in _patches(part):
            areas.append(area)
            samplers.append(sampler)
    probs = np.asarray(areas) / sum(areas)
    counts = rng.multinomial(n, probs)
    chunks = [s(rng, int(k)) for s, k in zip(samplers, counts) if k]
    canonical = np.concatenate(chunks, axis=0)
    rot, center, scale = _normalization(spec)
    posed = canonical @ rot.T * spec.pose_scale
    return PointCloud((posed - center) * scale)


# ---------------------------------------------------------------------------
# scan simulation
# ---------------------------------------------------------------------------


def simulate_scan(
    full: PointCloud, cam, az_bins: int = 128, el_bins: int = 128
) -> PointCloud:
    """Angular z-buffer: keep the nearest point per (azimuth, elevation) bin.

    The bin window adapts to the cloud's angular footprint as seen from the
    camera, so the configured resolution is spent on the object, not on
    empty sky.  Output rows keep their order from ``full``.
    """
    cam = as_point(cam)
    if full.count == 0:
        return full
    if az_bins < 1 or el_bins < 1:
        raise ValueError("bin counts must be >= 1")
    centroid = full.points.mean(axis=0)
    spread = np.linalg.norm(full.points - centroid, axis=1).max()
    if np.linalg.norm(cam - centroid) <= spread:
        raise CameraInside("camera lies within the cloud's bounding sphere")

    v = full.points - cam
    dist = np.linalg.norm(v, axis=1)
    fwd = centroid - cam
    fwd /= np.linalg.norm(fwd)
    helper = np.array([0.0, 0.0, 1.0])
    if abs(fwd @ helper) > 0.9:
        helper = np.array([0.0, 1.0, 0.0])
    e1 = np.cross(fwd, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(fwd, e1)

    az = np.arctan2(v @ e1, v @ fwd)
    el = np.arctan2(v @ e2, np.hypot(v @ fwd, v @ e1))

    def bin_ids(vals, count):
        lo, hi = float(vals.min()), float(vals.max())
        span = max(hi - lo, 1e-9)
        ids = ((vals - lo) / span * count).astype(np.int64)
        return np.minimum(ids, count - 1)

    flat = bin_ids(az, az_bins) * el_bins + bin_ids(el, el_bins)
    # Stable winner per bin: sort by (bin, distance, id) and keep firsts.
    order = np.lexsort((np.arange(full.count), dist, flat))
    first = np.ones(full.count, dtype=bool)
    first[1:] = flat[order[1:]] != flat[order[:-1]]
    keep = np.sort(order[first])
    return PointCloud(full.points[keep])


# ---------------------------------------------------------------------------
# training pairs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairSizes:
    """Point budgets: partial scan size and the three GT tier sizes."""

    partial: int = 256
    tiers: tuple[int, int, int] = (1024, 256, 2048)

    def __post_init__(self):
        if self.partial < 4:
            raise ValueError("partial size must be >= 4")
        tiers = tuple(int(t) for t in self.tiers)
        if len(tiers) != 3 or any(t < 1 for t in tiers):
            raise ValueError("three positive tier sizes required")
        object.__setattr__(self, "tiers", tiers)


@dataclass(frozen=True)
class SamplePair:
    """One training sample: partial scan, its camera, three GT tiers."""

    partial: PointCloud
    cam: np.ndarray
    gt_tiers: tuple[PointCloud, PointCloud, PointCloud]

    def __post_init__(self):
        object.__setattr__(self, "cam", as_point(self.cam))
        tiers = tuple(self.gt_tiers)
        if len(tiers) != 3:
            raise ValueError("exactly three GT tiers required")
        object.__setattr__(self, "gt_tiers", tiers)


def _child_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(parts).generate_state(1)[0])


def _scan_bins(partial_n: int) -> int:
    # Bin count tuned so the z-buffer hides the far side at the density
    # make_pair samples (DENSE_FACTOR points per requested partial point).
    return max(12, int(round(math.sqrt(1.25 * partial_n))))


def make_pair(spec: ShapeSpec, cam_seed: int, sizes: PairSizes = PairSizes()) -> SamplePair:
    """Scan a shape from a random camera and sample its GT tiers.

    The camera sits on a radius-1.5 sphere around the normalized shape and
    faces its center.  If occlusion leaves fewer than a quarter of the
    requested partial points, the camera is re-sampled; after
    CAMERA_ATTEMPTS failures the shape is declared degenerate.
    """
    n = sizes.partial
    dense = sample_surface(
        replace(spec, rng_seed=_child_seed(spec.rng_seed, cam_seed, 1)),
        DENSE_FACTOR * n,
    )
    bins = _scan_bins(n)
    for attempt in range(CAMERA_ATTEMPTS):
        rng = np.random.default_rng(np.random.SeedSequence((cam_seed, attempt, 43)))
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        cam = CAMERA_RADIUS * direction
        visible = simulate_scan(dense, cam, bins, bins)
        if visible.count >= n // 4:
            break
    else:
        raise DegenerateScan(
            f"no camera yielded {n // 4} visible points in {CAMERA_ATTEMPTS} tries"
        )
    if visible.count >= n:
        ids = farthest_point_sample(visible, n)
    else:
        ids = np.resize(np.arange(visible.count), n)
    partial = PointCloud(visible.points[ids])
    tiers = tuple(
        sample_surface(
            replace(spec, rng_seed=_child_seed(spec.rng_seed, cam_seed, 2 + t)),
            size,
        )
        for t, size in enumerate(sizes.tiers)
    )
    return SamplePair(partial=partial, cam=cam, gt_tiers=tiers)


# ---------------------------------------------------------------------------
# cloud file I/O
# ---------------------------------------------------------------------------

_PLY_PROPS = [b"property float x", b"property float y", b"property float z"]


def write_cloud(cloud: PointCloud, path, *, binary: bool = True) -> None:
    """Write .ply (float32 x/y/z, ascii or binary little-endian) or .xyz."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".xyz":
        with open(path, "w") as fh:
            for x, y, z in cloud.points.astype(np.float32):
                fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")
        return
    if suffix != ".ply":
        raise UnsupportedFormat(f"cannot write {suffix!r} files")
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        f"ply\nformat {fmt} 1.0\nelement vertex {cloud.count}\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n"
    )
    data = cloud.points.astype("<f4")
    if binary:
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(data.tobytes())
    else:
        with open(path, "w") as fh:
            fh.write(header)
            for x, y, z in data:
                fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")


def read_cloud(path) -> PointCloud:
    """Read a .ply (ascii / binary little-endian, float x/y/z) or .xyz file."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".xyz":
        return _read_xyz(path)
    if suffix != ".ply":
        raise UnsupportedFormat(f"cannot read {suffix!r} files")
    return _read_ply(path)


def _read_xyz(path: Path) -> PointCloud:
    rows = []
    with open(path, "r") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}:1: empty file")
    for lineno, line in enumerate(lines, start=1):
        cols = line.split()
        if len(cols) != 3:
            raise ParseError(f"{path}:{lineno}: expected 3 columns, got {len(cols)}")
        try:
            rows.append([float(c) for c in cols])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: bad number") from exc
    # Values were written at float32 precision; snap back onto that grid so
    # repeated write/read cycles are bitwise stable.
    return PointCloud(np.asarray(rows).astype(np.float32).astype(np.float64))


def _read_ply(path: Path) -> PointCloud:
    raw = path.read_bytes()
    if not raw:
        raise ParseError(f"{path}:1: empty file")
    end_marker = b"end_header\n"
    end = raw.find(end_marker)
    if not raw.startswith(b"ply\n") or end < 0:
        raise ParseError(f"{path}:1: not a ply header")
    header_lines = raw[:end].decode("ascii", errors="replace").splitlines()
    fmt, count, props = None, None, []
    for lineno, line in enumerate(header_lines, start=1):
        fields = line.split()
        if not fields or fields[0] == "comment" or fields[0] == "ply":
            continue
        if fields[0] == "format":
            if len(fields) != 3 or fields[1] not in ("ascii", "binary_little_endian"):
                raise UnsupportedFormat(f"{path}:{lineno}: unsupported ply format")
            fmt = fields[1]
        elif fields[0] == "element":
            if fields[1] != "vertex" or count is not None:
                raise UnsupportedFormat(f"{path}:{lineno}: only a vertex element is supported")
            try:
                count = int(fields[2])
            except (IndexError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: bad vertex count") from exc
        elif fields[0] == "property":
            props.append(line.strip())
    if fmt is None or count is None:
        raise ParseError(f"{path}:1: header missing format or vertex element")
    if props != [p.decode() for p in _PLY_PROPS]:
        raise UnsupportedFormat(f"{path}: only float x/y/z vertices are supported")
    body = raw[end + len(end_marker):]
    if fmt == "binary_little_endian":
        expected = 12 * count
        if len(body) != expected:
            raise ParseError(
                f"{path}: body holds {len(body)} bytes at offset {end + len(end_marker)}, "
                f"expected {expected}"
            )
        pts = np.frombuffer(body, dtype="<f4").reshape(count, 3)
        return PointCloud(pts.astype(np.float64))
    text = body.decode("ascii", errors="replace").splitlines()
    if len(text) < count:
        raise ParseError(f"{path}: {len(text)} data rows, expected {count}")
    rows = []
    base = len(header_lines) + 1
    for lineno, line in enumerate(text[:count], start=base + 1):
        cols = line.split()
        if len(cols) != 3:
            raise ParseError(f"{path}:{lineno}: expected 3 columns, got {len(cols)}")
        try:
            rows.append([float(c) for c in cols])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: bad number") from exc
    arr = np.asarray(rows, dtype=np.float64) if rows else np.zeros((0, 3))
    return PointCloud(arr.astype(np.float32).astype(np.float64))


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

_PAIR_KINDS = ("partial", "gt1", "gt2", "gt3")


def generate_dataset(
    root,
    count: int,
    sizes: PairSizes = PairSizes(),
    seed: int = 0,
    families: tuple[str, ...] = FAMILIES,
) -> dict:
    """Write ``count`` sample pairs under root/{train,test} plus a manifest.

    Samples cycle through the families; the train/test split follows the
    parity of each sample's shape seed.  Returns the manifest, which is also
    written to root/manifest.json.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    root = Path(root)
    samples = []
    for idx in range(count):
        family = families[idx % len(families)]
        shape_seed = _child_seed(seed, idx, 5)
        cam_seed = _child_seed(seed, idx, 7)
        spec = random_spec(family, shape_seed)
        pair = make_pair(spec, cam_seed, sizes)
        split = "train" if shape_seed % 2 == 0 else "test"
        sample_id = f"s{idx:04d}_{family}"
        out_dir = root / split
        out_dir.mkdir(parents=True, exist_ok=True)
        clouds = (pair.partial,) + pair.gt_tiers
        files = {}
        for kind, cloud in zip(_PAIR_KINDS, clouds):
            rel = f"{split}/{sample_id}_{kind}.ply"
            write_cloud(cloud, root / rel)
            files[kind] = rel
        samples.append(
            {
                "sample_id": sample_id,
                "category": family,
                "split": split,
                "cam": [float(c) for c in pair.cam],
                "files": files,
                "seeds": {"shape": shape_seed, "cam": cam_seed},
            }
        )
    manifest = {
        "sizes": {"partial": sizes.partial, "tiers": list(sizes.tiers)},
        "seed": seed,
        "samples": samples,
    }
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(root) -> dict:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise DatasetEmpty(f"no manifest at {path}")
    with open(path, "r") as fh:
        manifest = json.load(fh)
    if not manifest.get("samples"):
        raise DatasetEmpty(f"{path} lists no samples")
    return manifest


def load_pair(root, entry: dict) -> SamplePair:
    """Materialize one manifest entry back into a SamplePair."""
    root = Path(root)
    clouds = [read_cloud(root / entry["files"][kind]) for kind in _PAIR_KINDS]
    return SamplePair(
        partial=clouds[0], cam=np.asarray(entry["cam"]), gt_tiers=tuple(clouds[1:])
    )
