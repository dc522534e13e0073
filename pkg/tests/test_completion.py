"""Tests for the completion pipeline stages and their discipline invariants."""

import numpy as np
import numpy.testing as npt
import pytest

from raycomplete import autodiff as ad
from raycomplete.completion import (
    CompletionTrace,
    OffsetField,
    RefinementPlan,
    adjust_offsets,
    baseline_upsample,
    build_offset_graph,
    build_refine_graph,
    complete,
    init_predictor,
    init_refiner,
    predict_offsets,
    predictor_layout,
    refine,
    refiner_layout,
)
from raycomplete.errors import (
    EmptyCloud,
    InsufficientPoints,
    ShapeMismatch,
)
from raycomplete.geometry import (
    OffsetConstraint,
    PointCloud,
    ShadowVolume,
    build_rays,
    displace_along_rays,
    in_candidate_volume,
)
from raycomplete.net import AdamState, Gradient, adam_step, clip_gradient, init_params

# ---------------------------------------------------------------------------
# fixtures
# ---------------------------------------------------------------------------


def _sphere_points(rng, n, radius=0.4):
    v = rng.normal(size=(n, 3))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def _hemisphere_scan(rng, n=48):
    # Points on the camera-facing half of a sphere, camera on +x.
    pts = _sphere_points(rng, 4 * n)
    facing = pts[pts[:, 0] > 0.05][:n]
    return PointCloud(facing), np.array([1.5, 0.0, 0.0])


def _random_predictor(seed, L=4):
    # Xavier everywhere, heads included: a stand-in for arbitrary trained state.
    return init_params(predictor_layout(L), seed)


def _random_refiner(seed, splits=(1, 8)):
    return init_params(refiner_layout(splits), seed)


def _small_plan(fps=16, splits=(1, 8)):
    return RefinementPlan(fps_count=fps, split_factors=splits)


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------


class TestOffsetField:
    def test_initial_only(self):
        f = OffsetField(initial=np.zeros((3, 4)))
        assert f.adjustment is None
        npt.assert_array_equal(f.effective, np.zeros((3, 4)))

    def test_negative_initial_rejected(self):
        with pytest.raises(ValueError):
            OffsetField(initial=np.array([[-0.1]]))

    def test_adjustment_requires_final(self):
        with pytest.raises(ValueError):
            OffsetField(initial=np.zeros((1, 1)), adjustment=np.zeros((1, 1)))

    def test_relu_clamp_consistency(self):
        f = OffsetField(
            initial=np.array([[0.1]]),
            adjustment=np.array([[-0.2]]),
            final=np.array([[0.0]]),
        )
        assert f.final[0, 0] == 0.0
        npt.assert_array_equal(f.effective, [[0.0]])

    def test_inconsistent_final_rejected(self):
        with pytest.raises(ValueError):
            OffsetField(
                initial=np.array([[0.1]]),
                adjustment=np.array([[-0.2]]),
                final=np.array([[0.05]]),
            )


class TestRefinementPlan:
    def test_final_count(self):
        assert _small_plan(fps=256, splits=(1, 8)).final_count == 2048

    def test_validation(self):
        with pytest.raises(ValueError):
            RefinementPlan(fps_count=0)
        with pytest.raises(ValueError):
            RefinementPlan(split_factors=(0, 8))
        with pytest.raises(ValueError):
            RefinementPlan(
                split_factors=(1, 2, 4), constraint=OffsetConstraint(layer_count=2)
            )
        with pytest.raises(ShapeMismatch):
            RefinementPlan(fps_count=4, parent_offsets=np.zeros(3))


# ---------------------------------------------------------------------------
# offset prediction
# ---------------------------------------------------------------------------


class TestPredictOffsets:
    def test_zero_init_head_predicts_zero(self):
        rng = np.random.default_rng(1)
        scan, cam = _hemisphere_scan(rng)
        rays = build_rays(cam, scan)
        field = predict_offsets(rays, scan, init_predictor(7))
        npt.assert_array_equal(field.initial, 0.0)
        out = displace_along_rays(rays, field.initial)
        npt.assert_array_equal(out.points, np.repeat(scan.points, 4, axis=0))

    def test_offsets_nonnegative_for_any_params(self):
        rng = np.random.default_rng(2)
        scan, cam = _hemisphere_scan(rng)
        rays = build_rays(cam, scan)
        for seed in range(5):
            field = predict_offsets(rays, scan, _random_predictor(seed))
            assert field.initial.min() >= 0.0
            assert field.initial.shape == (scan.count, 4)

    def test_foreign_rays_rejected(self):
        rng = np.random.default_rng(3)
        scan, cam = _hemisphere_scan(rng)
        other = PointCloud(scan.points + 0.01)
        rays = build_rays(cam, other)
        with pytest.raises(ValueError):
            predict_offsets(rays, scan, init_predictor(0))


class TestAdjustOffsets:
    def test_zero_init_adjustment_is_identity(self):
        rng = np.random.default_rng(4)
        scan, cam = _hemisphere_scan(rng)
        rays = build_rays(cam, scan)
        params = init_predictor(9)
        field = predict_offsets(rays, scan, params)
        p_first = displace_along_rays(rays, field.initial)
        full = adjust_offsets(field, p_first, rays, params)
        npt.assert_array_equal(full.adjustment, 0.0)
        npt.assert_array_equal(full.final, full.initial)

    def test_final_is_clamped_sum(self):
        rng = np.random.default_rng(5)
        scan, cam = _hemisphere_scan(rng)
        rays = build_rays(cam, scan)
        params = _random_predictor(11)
        field = predict_offsets(rays, scan, params)
        p_first = displace_along_rays(rays, field.initial)
        full = adjust_offsets(field, p_first, rays, params)
        npt.assert_array_equal(
            full.final, np.maximum(0.0, full.initial + full.adjustment)
        )
        assert full.final.min() >= 0.0

    def test_adjustments_can_be_negative(self):
        rng = np.random.default_rng(6)
        scan, cam = _hemisphere_scan(rng)
        rays = build_rays(cam, scan)
        found_negative = False
        for seed in range(8):
            params = _random_predictor(100 + seed)
            field = predict_offsets(rays, scan, params)
            p_first = displace_along_rays(rays, field.initial)
            full = adjust_offsets(field, p_first, rays, params)
            if full.adjustment.min() < 0.0:
                found_negative = True
                break
        assert found_negative

    def test_foreign_p_first_rejected(self):
        rng = np.random.default_rng(7)
        scan, cam = _hemisphere_scan(rng)
        rays = build_rays(cam, scan)
        params = init_predictor(3)
        field = predict_offsets(rays, scan, params)
        wrong = PointCloud(np.repeat(scan.points, 4, axis=0) + 0.05)
        with pytest.raises(ValueError):
            adjust_offsets(field, wrong, rays, params)


# ---------------------------------------------------------------------------
# refinement
# ---------------------------------------------------------------------------


def _child_moves(p_mid, p_final, parents, splits):
    # Per-dimension |move| of each child relative to its parent, per unit.
    k1, k2 = splits
    mid_moves = np.abs(p_mid.points - np.repeat(parents, k1, axis=0))
    fin_moves = np.abs(p_final.points - np.repeat(p_mid.points, k2, axis=0))
    return mid_moves, fin_moves


class TestRefine:
    def test_zero_init_children_coincide_with_parents(self):
        rng = np.random.default_rng(8)
        scan, cam = _hemisphere_scan(rng)
        rays = build_rays(cam, scan)
        off = rng.uniform(0.0, 0.5, size=(scan.count, 4))
        p_o = displace_along_rays(rays, off)
        field = OffsetField(initial=off)
        plan = _small_plan()
        p_mid, p_final = refine(p_o, field, plan, init_refiner(5))
        assert p_mid.count == 16
        assert p_final.count == 128
        # Every final point equals its mid parent, which equals an fps parent.
        npt.assert_array_equal(p_final.points, np.repeat(p_mid.points, 8, axis=0))

    def test_constraint_discipline_random_params(self):
        rng = np.random.default_rng(9)
        scan, cam = _hemisphere_scan(rng)
        rays = build_rays(cam, scan)
        off = rng.uniform(0.0, 0.4, size=(scan.count, 4))
        p_o = displace_along_rays(rays, off)
        plan = _small_plan()
        c = plan.constraint
        for seed in range(5):
            graph = build_refine_graph(
                ad.constant(p_o.points),
                ad.constant(off.reshape(-1)),
                plan,
                _random_refiner(200 + seed),
                trainable=False,
            )
            parents = p_o.points[graph.parent_ids]
            par_off = graph.parent_offsets
            mid_moves, fin_moves = _child_moves(
                PointCloud(graph.p_mid.data),
                PointCloud(graph.p_final.data),
                parents,
                plan.split_factors,
            )
            c1 = (par_off / 2.0 + c.base) / c.alpha**0
            c2 = (par_off / 2.0 + c.base) / c.alpha**1
            assert np.all(mid_moves <= np.repeat(c1, 1)[:, None] + 1e-12)
            assert np.all(fin_moves <= np.repeat(c2, 8)[:, None] + 1e-12)

    def test_zero_offset_parent_budgets(self):
        rng = np.random.default_rng(10)
        scan, cam = _hemisphere_scan(rng, n=32)
        rays = build_rays(cam, scan)
        off = np.zeros((scan.count, 4))
        p_o = displace_along_rays(rays, off)
        plan = _small_plan(fps=8)
        for seed in range(3):
            p_mid, p_final = refine(
                p_o, OffsetField(initial=off), plan, _random_refiner(300 + seed)
            )
            mid_moves, fin_moves = _child_moves(
                p_mid, p_final, _fps_parents(p_o, 8), plan.split_factors
            )
            assert mid_moves.max() <= 0.03 + 1e-12
            assert fin_moves.max() <= 0.02 + 1e-12

    def test_insufficient_points_rejected(self):
        p_o = PointCloud(np.random.default_rng(0).uniform(-0.5, 0.5, (8, 3)))
        field = OffsetField(initial=np.zeros((8, 1)))
        with pytest.raises(InsufficientPoints):
            refine(p_o, field, _small_plan(fps=16), init_refiner(0))

    def test_offset_count_mismatch_rejected(self):
        p_o = PointCloud(np.random.default_rng(0).uniform(-0.5, 0.5, (8, 3)))
        field = OffsetField(initial=np.zeros((3, 1)))
        with pytest.raises(ShapeMismatch):
            refine(p_o, field, _small_plan(fps=4), init_refiner(0))


def _fps_parents(p_o, k):
    from raycomplete.spatial import farthest_point_sample

    return p_o.points[farthest_point_sample(p_o, k)]


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------


class TestComplete:
    def test_zero_init_final_points_sit_on_scan(self):
        rng = np.random.default_rng(11)
        scan, cam = _hemisphere_scan(rng)
        plan = _small_plan()
        trace = complete(scan, cam, init_predictor(1), init_refiner(2), plan)
        # Identity pipeline: every output point coincides with a scan point.
        d = np.abs(trace.p_final.points[:, None, :] - scan.points[None, :, :]).sum(-1)
        assert d.min(axis=1).max() == 0.0

    def test_counts_follow_plan(self):
        rng = np.random.default_rng(12)
        scan, cam = _hemisphere_scan(rng)
        plan = _small_plan(fps=16, splits=(1, 8))
        trace = complete(scan, cam, _random_predictor(31), _random_refiner(32), plan)
        assert trace.p_first.count == scan.count * 4
        assert trace.p_initial.count == scan.count * 4
        assert trace.p_mid.count == 16
        assert trace.p_final.count == 128
        assert trace.parent_ids.shape == (16,)
        assert trace.parent_offsets.shape == (16,)

    def test_ray_discipline_of_offset_stages(self):
        rng = np.random.default_rng(13)
        scan, cam = _hemisphere_scan(rng)
        rays = build_rays(cam, scan)
        trace = complete(
            scan, cam, _random_predictor(41), _random_refiner(42), _small_plan()
        )
        vol = ShadowVolume(rays=rays, angular_tolerance=0.0)
        for cloud in (trace.p_first, trace.p_initial):
            pts = cloud.points.reshape(scan.count, 4, 3)
            for i in range(scan.count):
                d = rays.directions[i]
                dn = d / np.linalg.norm(d)
                for l in range(4):
                    v = pts[i, l] - cam
                    perp = v - (v @ dn) * dn
                    assert np.linalg.norm(perp) < 1e-9
                    assert (v @ dn) / np.linalg.norm(d) >= 1.0 - 1e-12
            for q in cloud.points[:: 7]:
                assert in_candidate_volume(vol, q)

    def test_no_adjustment_skips_stage(self):
        rng = np.random.default_rng(14)
        scan, cam = _hemisphere_scan(rng)
        trace = complete(
            scan,
            cam,
            _random_predictor(51),
            _random_refiner(52),
            _small_plan(),
            no_adjustment=True,
        )
        assert trace.offsets.adjustment is None
        npt.assert_array_equal(trace.p_initial.points, trace.p_first.points)

    def test_fixed_bound_releases_constraint(self):
        rng = np.random.default_rng(15)
        scan, cam = _hemisphere_scan(rng)
        plan = _small_plan()
        kept = complete(scan, cam, _random_predictor(61), _random_refiner(62), plan)
        freed = complete(
            scan,
            cam,
            _random_predictor(61),
            _random_refiner(62),
            plan,
            fixed_bound=0.5,
        )
        # Same parents, same raw moves, different boxes: the freed run must
        # move some child beyond its offset-derived budget.
        parents = kept.p_initial.points[kept.parent_ids]
        c1 = kept.parent_offsets / 2.0 + 0.03
        freed_moves = np.abs(freed.p_mid.points - parents)
        assert np.any(freed_moves > c1[:, None] + 1e-12)
        assert np.all(freed_moves <= 0.5 + 1e-12)

    def test_empty_scan_rejected(self):
        with pytest.raises(EmptyCloud):
            complete(
                PointCloud(np.zeros((0, 3))),
                [0.0, 0.0, 1.5],
                init_predictor(0),
                init_refiner(0),
                _small_plan(),
            )


class TestObservedGeometryRetention:
    def test_zero_offset_parents_stay_near_scan(self):
        rng = np.random.default_rng(16)
        scan, cam = _hemisphere_scan(rng)
        plan = _small_plan(fps=16)
        for seed in range(4):
            trace = complete(
                scan, cam, init_predictor(71), _random_refiner(400 + seed), plan
            )
            # Zero-init predictor: all offsets zero, every parent sits on the
            # scan; children must stay within 0.03 + 0.02 per dimension.
            assert trace.parent_offsets.max() == 0.0
            k1, k2 = plan.split_factors
            for c_idx in range(trace.p_final.count):
                j = c_idx // k2 // k1
                parent_pos = trace.p_initial.points[trace.parent_ids[j]]
                delta = np.abs(trace.p_final.points[c_idx] - parent_pos)
                assert np.all(delta <= 0.05 + 1e-12)


# ---------------------------------------------------------------------------
# baseline
# ---------------------------------------------------------------------------


class TestBaselineUpsample:
    def test_downsample_is_fps_subset(self):
        rng = np.random.default_rng(17)
        scan = PointCloud(rng.uniform(-0.5, 0.5, (40, 3)))
        out = baseline_upsample(scan, 10)
        assert out.count == 10
        d = np.abs(out.points[:, None, :] - scan.points[None, :, :]).sum(-1)
        assert d.min(axis=1).max() == 0.0

    def test_exact_doubling_duplicates_every_point(self):
        rng = np.random.default_rng(18)
        scan = PointCloud(rng.uniform(-0.5, 0.5, (12, 3)))
        out = baseline_upsample(scan, 24)
        assert out.count == 24
        for p in scan.points:
            matches = np.all(out.points == p, axis=1).sum()
            assert matches == 2

    def test_partial_upsample_count(self):
        rng = np.random.default_rng(19)
        scan = PointCloud(rng.uniform(-0.5, 0.5, (10, 3)))
        out = baseline_upsample(scan, 17)
        assert out.count == 17

    def test_validation(self):
        with pytest.raises(EmptyCloud):
            baseline_upsample(PointCloud(np.zeros((0, 3))), 5)
        with pytest.raises(ValueError):
            baseline_upsample(PointCloud(np.zeros((2, 3))), 0)


# ---------------------------------------------------------------------------
# scripted overfit: offsets learn to fill in a sphere
# ---------------------------------------------------------------------------


class TestOffsetLearning:
    def test_overfit_single_scan_halves_chamfer(self):
        from raycomplete.metrics import chamfer

        rng = np.random.default_rng(20)
        scan, cam = _hemisphere_scan(rng, n=40)
        gt = PointCloud(_sphere_points(rng, 256))
        rays = build_rays(cam, scan)
        params = init_predictor(123)
        state = AdamState.fresh(params.count)
        start = None
        for step in range(500):
            graph = build_offset_graph(rays, params, no_adjustment=True)
            loss = ad.chamfer_to_const(graph.p_first, gt.points)
            if step == 0:
                start = float(loss.data)
            ad.backward(loss)
            grad = clip_gradient(graph.tensors.flat_grad(), 1.0)
            params, state = adam_step(params, grad, 1e-3, state)
        final_graph = build_offset_graph(rays, params, no_adjustment=True)
        end = chamfer(PointCloud(final_graph.p_first.data), gt)
        assert end <= 0.5 * start
