"""The completion pipeline: offset prediction, adjustment, refinement.

Stage 1 duplicates every scan point L times and predicts a non-negative
offset for each copy; displacing along the camera rays yields the first
coarse cloud P_first.  Stage 2 looks at that cloud and predicts a signed
correction per offset; re-displacing with relu(initial + adjustment) yields
P_initial.  Stage 3 downsamples P_initial with farthest point sampling and
runs two refinement units, each splitting every parent into children that
move inside a per-dimension box whose size derives from how far the parent
travelled along its ray (large travel, large box; untravelled scan points
keep a tight box and so keep their observed detail).

Everything is built through the autodiff graph so the same code serves
training and inference; inference callers get plain PointClouds back.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import EmptyCloud, InsufficientPoints, ShapeMismatch
from .geometry import (
    OffsetConstraint,
    PointCloud,
    RayBundle,
    as_point,
    build_rays,
)
from .net import LayerSpec, NetParams, ParamTensors, init_params, set_encode, stack_forward
from .spatial import farthest_point_sample

DEFAULT_POINTS_PER_RAY = 4
DEFAULT_FPS_COUNT = 256
DEFAULT_SPLIT_FACTORS = (1, 8)

# Layer index groups inside the offset-module layout.
_RAY_STACK = (0, 1)
_INIT_HEAD = (2, 3)
_CLOUD_STACK = (4, 5)
_ADJ_HEAD = (6, 7)

# Bound used when the offset-derived constraint is ablated away: half the
# normalized cube, i.e. effectively unconstrained movement.
UNCONSTRAINED_BOUND = 0.5


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------


def _ro(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class OffsetField:
    """Per-(ray, copy) offsets: initial prediction, signed adjustment, final.

    ``adjustment`` and ``final`` are None until the adjustment stage ran.
    Rows follow ray order; column l is the l-th copy of that ray's point.
    """

    initial: np.ndarray
    adjustment: np.ndarray | None = None
    final: np.ndarray | None = None

    def __post_init__(self):
        init = np.asarray(self.initial, dtype=np.float64)
        if init.ndim != 2:
            raise ShapeMismatch(f"initial offsets must be 2-D, got {init.shape}")
        if init.size and init.min() < 0.0:
            raise ValueError("initial offsets must be non-negative")
        object.__setattr__(self, "initial", _ro(init))
        if (self.adjustment is None) != (self.final is None):
            raise ValueError("adjustment and final must be set together")
        if self.adjustment is not None:
            adj = np.asarray(self.adjustment, dtype=np.float64)
            fin = np.asarray(self.final, dtype=np.float64)
            if adj.shape != init.shape or fin.shape != init.shape:
                raise ShapeMismatch("offset matrices must share one shape")
            if not np.array_equal(fin, np.maximum(0.0, init + adj)):
                raise ValueError("final must equal max(0, initial + adjustment)")
            object.__setattr__(self, "adjustment", _ro(adj))
            object.__setattr__(self, "final", _ro(fin))

    @property
    def effective(self) -> np.ndarray:
        """Offsets actually used downstream: final when present, else initial."""
        return self.final if self.final is not None else self.initial


@dataclass(frozen=True)
class RefinementPlan:
    """Refinement configuration: parent count, per-unit splits, movement budget.

    ``parent_offsets`` is filled per sample after the FPS step when a caller
    wants the realized plan; as a configuration it stays None.
    """

    fps_count: int = DEFAULT_FPS_COUNT
    split_factors: tuple[int, ...] = DEFAULT_SPLIT_FACTORS
    constraint: OffsetConstraint = OffsetConstraint()
    parent_offsets: np.ndarray | None = None

    def __post_init__(self):
        if self.fps_count < 1:
            raise ValueError("fps_count must be >= 1")
        factors = tuple(int(k) for k in self.split_factors)
        if any(k < 1 for k in factors):
            raise ValueError("split factors must be >= 1")
        if len(factors) != self.constraint.layer_count:
            raise ValueError(
                f"{len(factors)} split factors for {self.constraint.layer_count} layers"
            )
        object.__setattr__(self, "split_factors", factors)
        if self.parent_offsets is not None:
            po = np.asarray(self.parent_offsets, dtype=np.float64)
            if po.shape != (self.fps_count,):
                raise ShapeMismatch("parent_offsets length must equal fps_count")
            if po.size and po.min() < 0.0:
                raise ValueError("parent offsets must be non-negative")
            object.__setattr__(self, "parent_offsets", _ro(po))

    @property
    def final_count(self) -> int:
        n = self.fps_count
        for k in self.split_factors:
            n *= k
        return n


@dataclass(frozen=True)
class CompletionTrace:
    """All four stage clouds plus the bookkeeping linking them.

    parent_ids maps refinement parents to rows of p_initial; parent row j
    spawned p_final rows j*prod(splits) .. (j+1)*prod(splits)-1 in order.
    """

    p_first: PointCloud
    p_initial: PointCloud
    p_mid: PointCloud
    p_final: PointCloud
    offsets: OffsetField
    parent_ids: np.ndarray
    parent_offsets: np.ndarray


# ---------------------------------------------------------------------------
# layouts
# ---------------------------------------------------------------------------


def predictor_layout(points_per_ray: int = DEFAULT_POINTS_PER_RAY) -> tuple[LayerSpec, ...]:
    """Offset-module layers: ray stack, init head, cloud stack, adjust head.

    The init head is relu-terminated (offsets are non-negative by
    construction); the adjustment head is linear (corrections are signed).
    """
    L = int(points_per_ray)
    if L < 1:
        raise ValueError("points_per_ray must be >= 1")
    return (
        LayerSpec("relu", 6, 64),
        LayerSpec("relu", 64, 128),
        LayerSpec("relu", 256, 64),
        LayerSpec("relu", 64, L),
        LayerSpec("relu", 3, 32),
        LayerSpec("relu", 32, 128),
        LayerSpec("relu", 256, 64),
        LayerSpec("linear", 64, L),
    )


PREDICTOR_ZERO_LAYERS = (3, 7)


def refiner_layout(split_factors: tuple[int, ...] = DEFAULT_SPLIT_FACTORS) -> tuple[LayerSpec, ...]:
    """Refiner layers: cloud stack, then one tanh generator pair per unit."""
    layers = [LayerSpec("relu", 3, 64), LayerSpec("relu", 64, 128)]
    for k in split_factors:
        layers.append(LayerSpec("relu", 132, 64))
        layers.append(LayerSpec("tanh", 64, 3 * int(k)))
    return tuple(layers)


def refiner_zero_layers(split_factors: tuple[int, ...] = DEFAULT_SPLIT_FACTORS) -> tuple[int, ...]:
    return tuple(3 + 2 * u for u in range(len(split_factors)))


def init_predictor(rng_seed: int, points_per_ray: int = DEFAULT_POINTS_PER_RAY) -> NetParams:
    return init_params(predictor_layout(points_per_ray), rng_seed, PREDICTOR_ZERO_LAYERS)


def init_refiner(rng_seed: int, split_factors: tuple[int, ...] = DEFAULT_SPLIT_FACTORS) -> NetParams:
    return init_params(refiner_layout(split_factors), rng_seed, refiner_zero_layers(split_factors))


def _points_per_ray(params: NetParams) -> int:
    return params.layout[_INIT_HEAD[1]].n_out


# ---------------------------------------------------------------------------
# graph builders
# ---------------------------------------------------------------------------


@dataclass
class OffsetGraph:
    """Differentiable offset stage: tensors plus the parameter view."""

    o_first: ad.Tensor
    adjustment: ad.Tensor | None
    o_final: ad.Tensor
    p_first: ad.Tensor
    p_initial: ad.Tensor
    tensors: ParamTensors


@dataclass
class RefineGraph:
    """Differentiable refinement stage."""

    p_mid: ad.Tensor
    p_final: ad.Tensor
    parent_ids: np.ndarray
    parent_offsets: np.ndarray
    tensors: ParamTensors


def build_offset_graph(
    rays: RayBundle,
    params: NetParams,
    *,
    trainable: bool = True,
    no_adjustment: bool = False,
) -> OffsetGraph:
    """Forward pass of offset prediction and adjustment as graph Tensors."""
    n = rays.count
    if n == 0:
        raise EmptyCloud("offset prediction requires a non-empty scan")
    L = _points_per_ray(params)
    tensors = ParamTensors(params, trainable=trainable)

    feats = ad.constant(np.concatenate([rays.origins.points, rays.directions], axis=1))
    g1, per_ray = set_encode(tensors, _RAY_STACK, feats)
    joined = ad.concat_cols([per_ray, ad.broadcast_row(g1, n)])
    o_first = stack_forward(tensors, _INIT_HEAD, joined)

    rep_scan = ad.constant(np.repeat(rays.origins.points, L, axis=0))
    rep_dirs = ad.constant(np.repeat(rays.directions, L, axis=0))

    def displace(offsets: ad.Tensor) -> ad.Tensor:
        col = ad.reshape(offsets, (n * L, 1))
        return ad.add(rep_scan, ad.mul(col, rep_dirs))

    p_first = displace(o_first)

    if no_adjustment:
        return OffsetGraph(
            o_first=o_first,
            adjustment=None,
            o_final=o_first,
            p_first=p_first,
            p_initial=p_first,
            tensors=tensors,
        )

    g2, _ = set_encode(tensors, _CLOUD_STACK, p_first)
    joined2 = ad.concat_cols([per_ray, ad.broadcast_row(g2, n)])
    adjustment = stack_forward(tensors, _ADJ_HEAD, joined2)
    o_final = ad.relu(ad.add(o_first, adjustment))
    p_initial = displace(o_final)
    return OffsetGraph(
        o_first=o_first,
        adjustment=adjustment,
        o_final=o_final,
        p_first=p_first,
        p_initial=p_initial,
        tensors=tensors,
    )


def build_refine_graph(
    p_o: ad.Tensor,
    offsets: ad.Tensor,
    plan: RefinementPlan,
    params: NetParams,
    *,
    trainable: bool = True,
    fixed_bound: float | None = None,
) -> RefineGraph:
    """Forward pass of FPS plus the refinement units as graph Tensors.

    ``offsets`` is the per-point travelled offset of p_o, shape (|p_o|,) or
    (|p_o|, 1).  ``fixed_bound`` replaces the offset-derived movement budget
    with a constant box for the no-constraint ablation.
    """
    m = p_o.data.shape[0]
    if m < plan.fps_count:
        raise InsufficientPoints(f"{m} points cannot seed {plan.fps_count} parents")
    if len(params.layout) < 2 + 2 * len(plan.split_factors):
        raise ShapeMismatch("refiner layout has too few layers for the plan")

    tensors = ParamTensors(params, trainable=trainable)
    g, _ = set_encode(tensors, (0, 1), p_o)

    ids = farthest_point_sample(PointCloud(p_o.data), plan.fps_count)
    off_col = ad.reshape(offsets, (m, 1))
    cur_pts = ad.gather_rows(p_o, ids)
    cur_off = ad.gather_rows(off_col, ids)

    alpha, base = plan.constraint.alpha, plan.constraint.base
    stage_clouds = []
    for u, k in enumerate(plan.split_factors, start=1):
        count = cur_pts.data.shape[0]
        decay = alpha ** (u - 1)
        if fixed_bound is None:
            bound = ad.shift(ad.scale(cur_off, 0.5 / decay), base / decay)
        else:
            bound = ad.constant(np.full((count, 1), float(fixed_bound)))
        gen_in = ad.concat_cols([cur_pts, cur_off, ad.broadcast_row(g, count)])
        raw = stack_forward(tensors, (2 * u, 2 * u + 1), gen_in)
        children = ad.add(
            ad.repeat_rows(cur_pts, k),
            ad.mul(ad.repeat_rows(bound, k), ad.reshape(raw, (count * k, 3))),
        )
        cur_pts = children
        cur_off = ad.repeat_rows(cur_off, k)
        stage_clouds.append(children)

    return RefineGraph(
        p_mid=stage_clouds[0],
        p_final=stage_clouds[-1],
        parent_ids=ids,
        parent_offsets=off_col.data[ids, 0].copy(),
        tensors=tensors,
    )


# ---------------------------------------------------------------------------
# inference-facing operations
# ---------------------------------------------------------------------------


def predict_offsets(rays: RayBundle, scan: PointCloud, params: NetParams) -> OffsetField:
    """Initial non-negative offsets, one row per scan point."""
    if not np.array_equal(rays.origins.points, scan.points):
        raise ValueError("rays were not built from this scan")
    graph = build_offset_graph(rays, params, trainable=False, no_adjustment=True)
    return OffsetField(initial=graph.o_first.data)


def adjust_offsets(
    field: OffsetField, p_first: PointCloud, rays: RayBundle, params: NetParams
) -> OffsetField:
    """Signed per-offset corrections from the first coarse cloud."""
    L = _points_per_ray(params)
    if field.initial.shape != (rays.count, L):
        raise ShapeMismatch(
            f"offset shape {field.initial.shape} does not match {rays.count} rays, L={L}"
        )
    expected = np.repeat(rays.origins.points, L, axis=0) + field.initial.reshape(
        -1, 1
    ) * np.repeat(rays.directions, L, axis=0)
    if p_first.points.shape != expected.shape or not np.allclose(
        p_first.points, expected, rtol=0.0, atol=1e-9
    ):
        raise ValueError("p_first was not displaced from these initial offsets")

    tensors = ParamTensors(params, trainable=False)
    feats = ad.constant(np.concatenate([rays.origins.points, rays.directions], axis=1))
    _, per_ray = set_encode(tensors, _RAY_STACK, feats)
    g2, _ = set_encode(tensors, _CLOUD_STACK, ad.constant(p_first.points))
    joined2 = ad.concat_cols([per_ray, ad.broadcast_row(g2, rays.count)])
    adjustment = stack_forward(tensors, _ADJ_HEAD, joined2).data
    final = np.maximum(0.0, field.initial + adjustment)
    return OffsetField(initial=field.initial, adjustment=adjustment, final=final)


def refine(
    p_o: PointCloud, field: OffsetField, plan: RefinementPlan, params: NetParams
) -> tuple[PointCloud, PointCloud]:
    """FPS then the refinement units; returns (middle, final) clouds."""
    offsets = field.effective.reshape(-1)
    if offsets.size != p_o.count:
        raise ShapeMismatch(
            f"{offsets.size} offsets for {p_o.count} points; rows must align"
        )
    graph = build_refine_graph(
        ad.constant(p_o.points), ad.constant(offsets), plan, params, trainable=False
    )
    return PointCloud(graph.p_mid.data), PointCloud(graph.p_final.data)


def complete(
    scan: PointCloud,
    cam,
    predictor: NetParams,
    refiner: NetParams,
    plan: RefinementPlan,
    *,
    no_adjustment: bool = False,
    fixed_bound: float | None = None,
) -> CompletionTrace:
    """Full pipeline from a partial scan to the refined completion."""
    if scan.count == 0:
        raise EmptyCloud("cannot complete an empty scan")
    rays = build_rays(as_point(cam), scan)
    og = build_offset_graph(rays, predictor, trainable=False, no_adjustment=no_adjustment)
    rg = build_refine_graph(
        og.p_initial,
        ad.constant(og.o_final.data.reshape(-1)),
        plan,
        refiner,
        trainable=False,
        fixed_bound=fixed_bound,
    )
    if no_adjustment:
        field = OffsetField(initial=og.o_first.data)
    else:
        field = OffsetField(
            initial=og.o_first.data,
            adjustment=og.adjustment.data,
            final=og.o_final.data,
        )
    return CompletionTrace(
        p_first=PointCloud(og.p_first.data),
        p_initial=PointCloud(og.p_initial.data),
        p_mid=PointCloud(rg.p_mid.data),
        p_final=PointCloud(rg.p_final.data),
        offsets=field,
        parent_ids=rg.parent_ids,
        parent_offsets=rg.parent_offsets,
    )


def baseline_upsample(scan: PointCloud, count: int) -> PointCloud:
    """Duplicate-and-FPS baseline: the scan resampled to ``count`` points.

    Downsampling is plain FPS; upsampling tiles the scan before sampling, so
    the output is the scan plus evenly repeated duplicates.
    """
    if scan.count == 0:
        raise EmptyCloud("cannot upsample an empty scan")
    if count < 1:
        raise ValueError("count must be >= 1")
    if count <= scan.count:
        ids = farthest_point_sample(scan, count)
        return PointCloud(scan.points[ids])
    copies = -(-count // scan.count)
    tiled = PointCloud(np.tile(scan.points, (copies, 1)))
    ids = farthest_point_sample(tiled, count)
    return PointCloud(tiled.points[ids])
