import math

import numpy as np
import pytest

from voxens.dataset import Cube, GroundTruthField, box, sphere
from voxens.ensemble import DensityGrid, EnsembleGrid
from voxens.postprocess import (Histogram, PointSet, PostprocessError,
                                artifact_metrics, classify_points,
                                percentile_filter, robustness_compare,
                                uncertainty_histogram)


def _points(unc, density=None):
    unc = np.asarray(unc, dtype=np.float64)
    n = unc.size
    pos = np.column_stack([np.arange(n), np.zeros(n), np.zeros(n)])
    den = np.full(n, 20.0) if density is None else np.asarray(density, float)
    return PointSet(pos, den, unc)


def brute_force_percentile_split(unc, p):
    """Independent oracle: closest-ranks linear interpolation, then Eq-style set."""
    u = sorted(unc)
    n = len(u)
    rank = (n - 1) * p / 100.0
    lo = int(math.floor(rank))
    hi = min(lo + 1, n - 1)
    thr = u[lo] + (rank - lo) * (u[hi] - u[lo])
    kept_idx = {i for i, v in enumerate(unc) if v <= thr}
    return kept_idx, thr


# --- percentile_filter ---

def test_percentile_filter_hand_case():
    ps = _points([1, 2, 3, 4, 5, 6, 7, 8, 9, 10])
    kept, removed, thr = percentile_filter(ps, 90.0)
    assert thr == pytest.approx(9.1, abs=1e-12)
    assert len(kept) == 9 and len(removed) == 1
    assert set(kept.uncertainty) == set(range(1, 10))
    assert removed.uncertainty[0] == 10


def test_percentile_filter_ties_are_kept():
    ps = _points([2.5] * 8)
    kept, removed, thr = percentile_filter(ps, 50.0)
    assert thr == 2.5
    assert len(removed) == 0


def test_percentile_filter_p100_keeps_all():
    ps = _points([5, 1, 9, 3])
    kept, removed, thr = percentile_filter(ps, 100.0)
    assert len(removed) == 0
    assert thr == 9


def test_percentile_filter_empty_and_bad_p():
    with pytest.raises(PostprocessError, match="empty"):
        percentile_filter(PointSet.empty(), 90.0)
    ps = _points([1, 2])
    for bad in (0.0, -5.0, 100.5):
        with pytest.raises(PostprocessError):
            percentile_filter(ps, bad)


def test_percentile_filter_partition_and_threshold_separation():
    rng = np.random.default_rng(0)
    unc = rng.exponential(size=500)
    ps = _points(unc)
    kept, removed, thr = percentile_filter(ps, 72.5)
    assert len(kept) + len(removed) == len(ps)
    assert kept.uncertainty.max() <= thr
    if len(removed):
        assert removed.uncertainty.min() > thr


def test_percentile_filter_matches_brute_force():
    rng = np.random.default_rng(1)
    unc = rng.normal(size=2000) ** 2
    ps = _points(unc)
    for p in (10.0, 37.3, 50.0, 90.0, 99.0, 100.0):
        kept, removed, thr = percentile_filter(ps, p)
        kept_idx, thr_ref = brute_force_percentile_split(list(unc), p)
        assert thr == pytest.approx(thr_ref, rel=1e-12, abs=1e-12)
        got_idx = set(kept.positions[:, 0].astype(int))
        assert got_idx == kept_idx
        frac = len(kept) / len(ps)
        assert p / 100.0 - 1.0 / len(ps) <= frac <= 1.0


def test_percentile_filter_monotone_in_p():
    rng = np.random.default_rng(2)
    ps = _points(rng.uniform(size=300))
    prev = set()
    for p in (5.0, 25.0, 60.0, 95.0, 100.0):
        kept, _, _ = percentile_filter(ps, p)
        cur = set(kept.positions[:, 0].astype(int))
        assert prev <= cur
        prev = cur


def test_percentile_filter_order_invariant():
    rng = np.random.default_rng(3)
    unc = rng.uniform(size=100)
    perm = rng.permutation(100)
    a_kept, a_removed, a_thr = percentile_filter(_points(unc), 80.0)
    b_kept, b_removed, b_thr = percentile_filter(_points(unc[perm]), 80.0)
    assert a_thr == pytest.approx(b_thr, rel=1e-12)
    assert sorted(a_kept.uncertainty) == pytest.approx(sorted(b_kept.uncertainty))


# --- histogram ---

def test_histogram_hand_case():
    h = uncertainty_histogram([0.0, 1.0, 2.0, 3.0], 2, (0.0, 4.0))
    assert np.array_equal(h.counts, [2, 2])
    assert np.allclose(h.bin_edges, [0.0, 2.0, 4.0])


def test_histogram_single_value():
    h = uncertainty_histogram([1.5], 5)
    assert h.counts.sum() == 1
    assert (h.counts > 0).sum() == 1


def test_histogram_final_edge_inclusive():
    h = uncertainty_histogram([0.0, 4.0], 4, (0.0, 4.0))
    assert h.counts[-1] == 1
    assert h.counts.sum() == 2


def test_histogram_matches_reference_loop():
    rng = np.random.default_rng(4)
    values = np.abs(rng.normal(size=100_000))
    bins = 32
    lo, hi = float(values.min()), float(values.max())
    h = uncertainty_histogram(values, bins)
    width = (hi - lo) / bins
    ref = np.zeros(bins, dtype=int)
    for v in values:
        idx = min(int((v - lo) / width), bins - 1)
        ref[idx] += 1
    assert np.array_equal(h.counts, ref)
    assert h.counts.sum() == values.size


def test_histogram_validation():
    with pytest.raises(PostprocessError, match="empty"):
        uncertainty_histogram([], 4)
    with pytest.raises(PostprocessError):
        uncertainty_histogram([1.0], 0)
    with pytest.raises(PostprocessError):
        Histogram(np.array([0.0, 1.0]), np.array([1, 2]))


# --- ground-truth scoring ---

GT = GroundTruthField((
    sphere((0.0, 0.0, 0.0), 0.5, 30.0, (0.8, 0.2, 0.2)),
    box((1.5, 0.0, 0.0), (0.3, 0.3, 0.3), 30.0, (0.2, 0.2, 0.8)),
))


def test_classify_points_categories():
    pts = np.array([
        [0.0, 0.0, 0.52],   # near the sphere boundary
        [0.0, 0.0, 0.0],    # deep inside the sphere
        [0.0, 2.0, 2.0],    # far from everything
        [1.5, 0.0, 0.0],    # deep inside the box
    ])
    surface, artifact, interior = classify_points(pts, GT, 0.05)
    assert surface.tolist() == [True, False, False, False]
    assert artifact.tolist() == [False, False, True, False]
    assert interior.tolist() == [False, True, False, True]


def test_classify_against_brute_force_loop():
    rng = np.random.default_rng(5)
    pts = rng.uniform(-1, 2.5, size=(500, 3))
    eps = 0.08
    surface, artifact, interior = classify_points(pts, GT, eps)
    for i, p in enumerate(pts):
        sds = [prim.signed_distance(p[None])[0] for prim in GT.primitives]
        s = min(abs(d) for d in sds) <= eps
        a = (not s) and min(sds) > eps
        assert surface[i] == s
        assert artifact[i] == a
        assert interior[i] == ((not s) and (not a))


def test_classify_empty_gt_makes_everything_artifact():
    pts = np.array([[0.0, 0.0, 0.0]])
    surface, artifact, interior = classify_points(pts, GroundTruthField(()), 0.1)
    assert artifact.tolist() == [True]


def test_artifact_metrics_empty_removed():
    kept = _points([1, 2, 3])
    rep = artifact_metrics(kept, PointSet.empty(), GT, 0.05)
    assert rep.enrichment_ratio is None
    assert rep.artifact_fraction_removed is None


def test_artifact_metrics_clean_split():
    # kept points on the sphere surface, removed points in empty space
    kept = PointSet(np.array([[0.5, 0.0, 0.0], [0.0, 0.5, 0.0]]),
                    np.full(2, 20.0), np.zeros(2))
    removed = PointSet(np.array([[0.0, 3.0, 0.0], [3.0, 3.0, 3.0]]),
                       np.full(2, 20.0), np.ones(2))
    rep = artifact_metrics(kept, removed, GT, 0.05)
    assert rep.artifact_fraction_removed == 1.0
    assert rep.artifact_fraction_kept == 0.0
    assert rep.surface_recall_kept == 1.0
    assert rep.enrichment_ratio == math.inf


def test_artifact_metrics_enrichment_value():
    kept_pos = np.vstack([np.tile([0.5, 0.0, 0.0], (8, 1)),
                          np.tile([0.0, 3.0, 0.0], (2, 1))])   # 20% artifacts
    removed_pos = np.vstack([np.tile([0.5, 0.0, 0.0], (2, 1)),
                             np.tile([0.0, 3.0, 0.0], (2, 1))])  # 50% artifacts
    kept = PointSet(kept_pos, np.full(10, 20.0), np.zeros(10))
    removed = PointSet(removed_pos, np.full(4, 20.0), np.ones(4))
    rep = artifact_metrics(kept, removed, GT, 0.05)
    assert rep.enrichment_ratio == pytest.approx(2.5)
    assert rep.surface_recall_kept == pytest.approx(8 / 10)


def test_artifact_metrics_requires_positive_eps():
    with pytest.raises(PostprocessError):
        artifact_metrics(_points([1.0]), PointSet.empty(), GT, 0.0)


# --- robustness ---

def _density_grid(values):
    return DensityGrid(Cube(np.array([-1.0, -1.0, -1.0]), 2.0),
                       np.asarray(values, dtype=np.float64))


def test_robustness_identical_members():
    rng = np.random.default_rng(6)
    vals = rng.normal(scale=20, size=(8, 8, 8))
    grids = [_density_grid(vals) for _ in range(3)]
    eg = EnsembleGrid(grids[0].bbox, vals, np.zeros_like(vals), members=3)
    rep = robustness_compare(grids, eg, 15.0, GT, 0.1)
    assert all(c == rep.ensemble_artifact_count for c in rep.member_artifact_counts)
    assert all(c == rep.ensemble_point_count for c in rep.member_point_counts)


def test_robustness_report_shape():
    rng = np.random.default_rng(7)
    grids = [_density_grid(rng.normal(scale=20, size=(6, 6, 6))) for _ in range(5)]
    stack = np.stack([g.values for g in grids])
    eg = EnsembleGrid(grids[0].bbox, stack.mean(0), stack.std(0, ddof=1), members=5)
    rep = robustness_compare(grids, eg, 15.0, GT, 0.1)
    assert len(rep.member_artifact_counts) == 5
    assert len(rep.member_point_counts) == 5
    assert isinstance(rep.ensemble_artifact_count, int)


def test_robustness_requires_two_grids():
    g = _density_grid(np.zeros((4, 4, 4)))
    eg = EnsembleGrid(g.bbox, g.values, np.zeros_like(g.values), members=2)
    with pytest.raises(PostprocessError):
        robustness_compare([g], eg, 15.0, GT, 0.1)


# --- PointSet basics ---

def test_pointset_validation():
    with pytest.raises(PostprocessError):
        PointSet(np.zeros((2, 3)), np.zeros(2), np.array([-0.1, 0.0]))
    with pytest.raises(PostprocessError):
        PointSet(np.zeros((2, 3)), np.zeros(3), np.zeros(2))
    ps = PointSet(np.zeros((2, 3)), np.zeros(2), np.zeros(2),
                  rgb=np.full((2, 3), 0.5))
    assert len(ps) == 2
    sub = ps.take(np.array([True, False]))
    assert len(sub) == 1 and sub.rgb.shape == (1, 3)
