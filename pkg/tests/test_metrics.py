"""Tests for the evaluation metrics against brute-force O(n^2) oracles."""

import numpy as np
import numpy.testing as npt
import pytest

from raycomplete.errors import EmptyCloud
from raycomplete.geometry import PointCloud
from raycomplete.metrics import (
    MetricsReport,
    aggregate_reports,
    chamfer,
    dcd,
    evaluate_pair,
    fscore,
    report_to_json,
    scd,
    scd_split,
)

# ---------------------------------------------------------------------------
# double-loop oracles
# ---------------------------------------------------------------------------


def _sq_matrix(A, B):
    return ((A[:, None, :] - B[None, :, :]) ** 2).sum(-1)


def _brute_chamfer(A, B, mode="mean"):
    d = _sq_matrix(A, B)
    ab, ba = d.min(axis=1), d.min(axis=0)
    if mode == "sum":
        return ab.sum() + ba.sum()
    return ab.mean() + ba.mean()


def _brute_fscore(R, G, tau):
    d = _sq_matrix(R, G)
    p = (d.min(axis=1) <= tau * tau).mean()
    r = (d.min(axis=0) <= tau * tau).mean()
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def _brute_dcd_side(A, B, temp):
    d = _sq_matrix(A, B)
    ids = d.argmin(axis=1)
    counts = np.bincount(ids, minlength=len(B))
    return (1.0 - np.exp(-temp * d.min(axis=1)) / counts[ids]).mean()


def _brute_dcd(A, B, temp):
    return 0.5 * (_brute_dcd_side(A, B, temp) + _brute_dcd_side(B, A, temp))


def _brute_split(R, G, P, radius):
    gt_obs = _sq_matrix(G, P).min(axis=1) <= radius * radius
    gt1_ids = np.nonzero(gt_obs)[0]
    gt2_ids = np.nonzero(~gt_obs)[0]
    G2 = G[gt2_ids]
    d_partial = _sq_matrix(R, P).min(axis=1)
    if len(G2):
        d_gt2 = _sq_matrix(R, G2).min(axis=1)
    else:
        d_gt2 = np.full(len(R), np.inf)
    to_partial = d_partial <= d_gt2
    return gt1_ids, gt2_ids, np.nonzero(to_partial)[0], np.nonzero(~to_partial)[0]


def _cloud(rng, n, scale=0.5):
    return PointCloud(rng.uniform(-scale, scale, size=(n, 3)))


# ---------------------------------------------------------------------------
# chamfer
# ---------------------------------------------------------------------------


class TestChamfer:
    def test_identical_clouds_zero(self):
        rng = np.random.default_rng(0)
        a = _cloud(rng, 40)
        assert chamfer(a, a) == 0.0

    def test_two_single_points(self):
        a = PointCloud([[0.0, 0.0, 0.0]])
        b = PointCloud([[1.0, 0.0, 0.0]])
        assert chamfer(a, b) == pytest.approx(2.0, abs=1e-15)

    def test_sum_mode_drops_normalization(self):
        a = PointCloud([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        b = PointCloud([[1.0, 0.0, 0.0]])
        # mean: 1 + 1 = 2; sum: 2 + 1 = 3.
        assert chamfer(a, b) == pytest.approx(2.0, abs=1e-15)
        assert chamfer(a, b, mode="sum") == pytest.approx(3.0, abs=1e-15)

    def test_symmetry_exact(self):
        rng = np.random.default_rng(8)
        a, b = _cloud(rng, 33), _cloud(rng, 57)
        assert chamfer(a, b) == chamfer(b, a)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(4)
        for _ in range(25):
            a, b = _cloud(rng, 64), _cloud(rng, 64)
            for mode in ("mean", "sum"):
                got = chamfer(a, b, mode=mode)
                want = _brute_chamfer(a.points, b.points, mode)
                assert got == pytest.approx(want, abs=1e-12)

    def test_empty_cloud_rejected(self):
        a = PointCloud([[0.0, 0.0, 0.0]])
        empty = PointCloud(np.zeros((0, 3)))
        with pytest.raises(EmptyCloud):
            chamfer(a, empty)
        with pytest.raises(EmptyCloud):
            chamfer(empty, a)

    def test_unknown_mode_rejected(self):
        a = PointCloud([[0.0, 0.0, 0.0]])
        with pytest.raises(ValueError):
            chamfer(a, a, mode="median")


# ---------------------------------------------------------------------------
# f-score
# ---------------------------------------------------------------------------


class TestFscore:
    def test_identical_clouds_one(self):
        rng = np.random.default_rng(2)
        a = _cloud(rng, 30)
        assert fscore(a, a, tau=1e-6) == 1.0

    def test_far_points_zero(self):
        r = PointCloud([[0.0, 0.0, 0.0]])
        g = PointCloud([[1.0, 0.0, 0.0]])
        assert fscore(r, g, tau=0.01) == 0.0

    def test_half_and_half(self):
        r = PointCloud([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        g = PointCloud([[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]])
        assert fscore(r, g, tau=0.01) == pytest.approx(0.5, abs=1e-15)

    def test_threshold_boundary_inclusive(self):
        r = PointCloud([[0.0, 0.0, 0.0]])
        g = PointCloud([[0.25, 0.0, 0.0]])
        assert fscore(r, g, tau=0.25) == 1.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(6)
        for _ in range(25):
            r, g = _cloud(rng, 48), _cloud(rng, 40)
            tau = float(rng.uniform(0.05, 0.8))
            assert fscore(r, g, tau) == pytest.approx(
                _brute_fscore(r.points, g.points, tau), abs=1e-12
            )

    def test_validation(self):
        a = PointCloud([[0.0, 0.0, 0.0]])
        with pytest.raises(ValueError):
            fscore(a, a, tau=0.0)
        with pytest.raises(EmptyCloud):
            fscore(a, PointCloud(np.zeros((0, 3))))


# ---------------------------------------------------------------------------
# density-aware chamfer
# ---------------------------------------------------------------------------


class TestDcd:
    def test_identical_distinct_clouds_zero(self):
        rng = np.random.default_rng(3)
        a = _cloud(rng, 25)
        assert dcd(a, a) == 0.0

    def test_duplicate_density_penalty(self):
        a = PointCloud([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        b = PointCloud([[0.0, 0.0, 0.0]])
        assert dcd(a, b) == pytest.approx(0.25, abs=1e-12)

    def test_far_single_points_approach_one(self):
        a = PointCloud([[0.0, 0.0, 0.0]])
        b = PointCloud([[10.0, 0.0, 0.0]])
        v = dcd(a, b, temp=1000.0)
        assert 0.999 < v <= 1.0

    def test_in_unit_interval(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            a, b = _cloud(rng, 30), _cloud(rng, 50)
            assert 0.0 <= dcd(a, b) <= 1.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(12)
        for _ in range(25):
            a, b = _cloud(rng, 64), _cloud(rng, 48)
            temp = float(rng.uniform(1.0, 2000.0))
            assert dcd(a, b, temp) == pytest.approx(
                _brute_dcd(a.points, b.points, temp), abs=1e-12
            )

    def test_validation(self):
        a = PointCloud([[0.0, 0.0, 0.0]])
        with pytest.raises(ValueError):
            dcd(a, a, temp=0.0)
        with pytest.raises(EmptyCloud):
            dcd(PointCloud(np.zeros((0, 3))), a)


# ---------------------------------------------------------------------------
# split construction
# ---------------------------------------------------------------------------


class TestScdSplit:
    def test_radius_divides_gt(self):
        partial = PointCloud([[0.0, 0.0, 0.0]])
        gt = PointCloud([[0.0, 0.0, 0.005], [1.0, 0.0, 0.0]])
        s = scd_split(PointCloud([[0.0, 0.0, 0.0]]), gt, partial, radius=0.01)
        npt.assert_array_equal(s.gt1_ids, [0])
        npt.assert_array_equal(s.gt2_ids, [1])
        npt.assert_allclose(s.gt1.points, [[0.0, 0.0, 0.005]])
        npt.assert_allclose(s.gt2.points, [[1.0, 0.0, 0.0]])

    def test_result_near_partial_goes_observed(self):
        partial = PointCloud([[0.0, 0.0, 0.0]])
        gt = PointCloud([[0.0, 0.0, 0.005], [1.0, 0.0, 0.0]])
        result = PointCloud([[0.0, 0.0, 0.001], [1.0, 0.0, 0.001]])
        s = scd_split(result, gt, partial, radius=0.01)
        npt.assert_array_equal(s.result1_ids, [0])
        npt.assert_array_equal(s.result2_ids, [1])

    def test_equidistant_result_point_goes_to_partial_side(self):
        partial = PointCloud([[-1.0, 0.0, 0.0]])
        gt = PointCloud([[1.0, 0.0, 0.0]])  # all of gt is far: gt2
        result = PointCloud([[0.0, 0.0, 0.0]])  # exactly between
        s = scd_split(result, gt, partial, radius=0.01)
        npt.assert_array_equal(s.result1_ids, [0])
        assert s.result2_ids.size == 0

    def test_gt_radius_boundary_inclusive(self):
        partial = PointCloud([[0.0, 0.0, 0.0]])
        gt = PointCloud([[0.25, 0.0, 0.0]])
        s = scd_split(PointCloud([[0.0, 0.0, 0.0]]), gt, partial, radius=0.25)
        npt.assert_array_equal(s.gt1_ids, [0])

    def test_tiny_radius_sends_gt_to_missing_side(self):
        rng = np.random.default_rng(13)
        partial, gt = _cloud(rng, 20), _cloud(rng, 30)
        result = _cloud(rng, 10)
        s = scd_split(result, gt, partial, radius=1e-12)
        assert s.gt1.count == 0
        assert s.gt2.count == 30

    def test_partition_invariants(self):
        rng = np.random.default_rng(21)
        for _ in range(20):
            result, gt, partial = _cloud(rng, 40), _cloud(rng, 50), _cloud(rng, 30)
            s = scd_split(result, gt, partial, radius=0.15)
            assert s.gt1.count + s.gt2.count == gt.count
            assert s.result1.count + s.result2.count == result.count
            merged_gt = np.concatenate([s.gt1_ids, s.gt2_ids])
            merged_res = np.concatenate([s.result1_ids, s.result2_ids])
            npt.assert_array_equal(np.sort(merged_gt), np.arange(gt.count))
            npt.assert_array_equal(np.sort(merged_res), np.arange(result.count))

    def test_matches_brute_force(self):
        rng = np.random.default_rng(31)
        for _ in range(30):
            result, gt, partial = _cloud(rng, 45), _cloud(rng, 60), _cloud(rng, 25)
            radius = float(rng.uniform(0.05, 0.4))
            s = scd_split(result, gt, partial, radius=radius)
            g1, g2, r1, r2 = _brute_split(
                result.points, gt.points, partial.points, radius
            )
            npt.assert_array_equal(s.gt1_ids, g1)
            npt.assert_array_equal(s.gt2_ids, g2)
            npt.assert_array_equal(s.result1_ids, r1)
            npt.assert_array_equal(s.result2_ids, r2)

    def test_validation(self):
        a = PointCloud([[0.0, 0.0, 0.0]])
        empty = PointCloud(np.zeros((0, 3)))
        with pytest.raises(ValueError):
            scd_split(a, a, a, radius=0.0)
        with pytest.raises(EmptyCloud):
            scd_split(a, empty, a)
        with pytest.raises(EmptyCloud):
            scd_split(a, a, empty)


# ---------------------------------------------------------------------------
# split scoring
# ---------------------------------------------------------------------------


class TestScd:
    def test_aligned_split_scores_zero(self):
        partial = PointCloud([[0.0, 0.0, 0.0]])
        gt = PointCloud([[0.0, 0.0, 0.005], [1.0, 0.0, 0.0]])
        s = scd_split(gt, gt, partial, radius=0.01)
        v = scd(s)
        assert tuple(v) == (0.0, 0.0)
        assert not v.scd1_empty and not v.scd2_empty

    def test_sides_are_independent(self):
        partial = PointCloud([[0.0, 0.0, 0.0]])
        gt = PointCloud([[0.0, 0.0, 0.005], [1.0, 0.0, 0.0]])
        # Observed side perfect, missing side displaced.
        result = PointCloud([[0.0, 0.0, 0.005], [1.1, 0.0, 0.0]])
        v = scd(scd_split(result, gt, partial, radius=0.01))
        assert v.scd1 == 0.0
        assert v.scd2 > 0.0

    def test_empty_missing_side_flags_instead_of_error(self):
        partial = PointCloud([[0.0, 0.0, 0.0]])
        gt = PointCloud([[0.0, 0.0, 0.005]])  # fully observed
        result = PointCloud([[0.0, 0.0, 0.001]])
        v = scd(scd_split(result, gt, partial, radius=0.01))
        assert v.scd2 == 0.0
        assert v.scd2_empty
        assert not v.scd1_empty

    def test_composes_with_oracle_splits(self):
        rng = np.random.default_rng(55)
        for _ in range(15):
            result, gt, partial = _cloud(rng, 40), _cloud(rng, 50), _cloud(rng, 20)
            s = scd_split(result, gt, partial, radius=0.2)
            v = scd(s)
            g1, g2, r1, r2 = _brute_split(
                result.points, gt.points, partial.points, 0.2
            )
            if len(r1) and len(g1):
                want1 = _brute_chamfer(result.points[r1], gt.points[g1])
                assert v.scd1 == pytest.approx(want1, abs=1e-12)
            else:
                assert v.scd1 == 0.0 and v.scd1_empty
            if len(r2) and len(g2):
                want2 = _brute_chamfer(result.points[r2], gt.points[g2])
                assert v.scd2 == pytest.approx(want2, abs=1e-12)
            else:
                assert v.scd2 == 0.0 and v.scd2_empty


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


class TestReports:
    def _triple(self, rng):
        return _cloud(rng, 40), _cloud(rng, 50), _cloud(rng, 20)

    def test_evaluate_pair_counts_and_ranges(self):
        rng = np.random.default_rng(77)
        result, gt, partial = self._triple(rng)
        rep = evaluate_pair(result, gt, partial, radius=0.2)
        assert rep.point_counts[0] == 40
        assert rep.point_counts[1] == 50
        assert rep.point_counts[2] + rep.point_counts[3] == 50
        assert 0.0 <= rep.fscore <= 1.0
        assert 0.0 <= rep.dcd <= 1.0

    def test_report_validation(self):
        with pytest.raises(ValueError):
            MetricsReport(
                cd=-1.0, fscore=0.5, dcd=0.5, scd1=0.0, scd2=0.0,
                point_counts=(1, 1, 1, 0),
            )
        with pytest.raises(ValueError):
            MetricsReport(
                cd=1.0, fscore=1.5, dcd=0.5, scd1=0.0, scd2=0.0,
                point_counts=(1, 1, 1, 0),
            )

    def test_json_fields(self):
        rng = np.random.default_rng(78)
        rep = evaluate_pair(*self._triple(rng), radius=0.2)
        obj = report_to_json("sample_007", rep)
        assert obj["sample_id"] == "sample_007"
        for key in ("cd", "fscore", "dcd", "scd1", "scd2", "counts"):
            assert key in obj
        assert set(obj["counts"]) == {"result", "gt", "gt1", "gt2"}

    def test_aggregate_means(self):
        rng = np.random.default_rng(79)
        entries = []
        for i in range(6):
            rep = evaluate_pair(*self._triple(rng), radius=0.2)
            entries.append(("box" if i % 2 else "sphere", rep))
        agg = aggregate_reports(entries)
        assert set(agg["categories"]) == {"box", "sphere"}
        assert agg["overall"]["count"] == 6
        want_cd = np.mean([r.cd for _, r in entries])
        assert agg["overall"]["cd"] == pytest.approx(want_cd, rel=1e-12)

    def test_aggregate_skips_flagged_scd(self):
        base = dict(cd=1.0, fscore=0.5, dcd=0.5, point_counts=(1, 1, 1, 0))
        r1 = MetricsReport(scd1=0.2, scd2=0.0, scd2_empty=True, **base)
        r2 = MetricsReport(scd1=0.4, scd2=0.6, **base)
        agg = aggregate_reports([("c", r1), ("c", r2)])
        assert agg["overall"]["scd2"] == pytest.approx(0.6)
        assert agg["overall"]["scd2_skipped"] == 1

    def test_aggregate_rejects_empty(self):
        with pytest.raises(ValueError):
            aggregate_reports([])
