import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vesselkp import metrics
from vesselkp.metrics import PairEvaluation, aggregate
from vesselkp.types import Homography

from oracles import auc_sweep


def ev(pid, errs):
    return PairEvaluation(pid, np.asarray(errs, float))


def test_default_threshold_is_25():
    assert metrics.DEFAULT_THRESHOLD == 25
    assert aggregate([ev("a", [1.0])]).curve.shape == (25,)


def test_two_pair_step_curve():
    agg = aggregate([ev("a", [3.0, 10.0]), ev("b", [40.0, 1.0])])
    assert agg.AUC == 0.32
    assert agg.mMAE == 25.0 and agg.mMEE == (6.5 + 20.5) / 2


def test_trivial_cases():
    agg = aggregate([ev("a", [0, 0]), ev("b", [0])])
    assert (agg.AUC, agg.mMAE, agg.mMEE) == (1.0, 0.0, 0.0)
    assert aggregate([ev("a", [30.0]), ev("b", [1.0, 30.0])]).AUC == 0.0


def test_failures_excluded_from_means_but_never_succeed():
    agg = aggregate([ev("a", [2.0]), PairEvaluation.failed("b")])
    assert agg.mMAE == 2.0 and agg.n_failed == 1
    assert agg.AUC == pytest.approx(0.5 * 24 / 25, abs=1e-15)
    only_failed = aggregate([PairEvaluation.failed("x")])
    assert only_failed.AUC == 0.0 and np.isnan(only_failed.mMAE)


def test_invalid_evaluations():
    with pytest.raises(ValueError):
        PairEvaluation("a", np.array([-1.0]))
    with pytest.raises(ValueError):
        aggregate([])
    with pytest.raises(ValueError):
        aggregate([ev("a", [1.0])], statistic="median")


error_sets = st.lists(st.lists(st.floats(0, 60, allow_nan=False), min_size=1, max_size=6), min_size=1, max_size=12)


@settings(max_examples=200, deadline=None)
@given(error_sets, st.integers(1, 40), st.lists(st.booleans(), max_size=12))
def test_aggregate_matches_sweep_oracle(sets, T, fail):
    evals = [ev(str(i), e) for i, e in enumerate(sets)]
    evals += [PairEvaluation.failed(f"f{i}") for i, f in enumerate(fail) if f]
    agg = aggregate(evals, T)
    stats = [max(e) for e in sets] + [np.inf] * sum(fail)
    assert abs(agg.AUC - auc_sweep(stats, T)) <= 1e-12
    assert agg.mMEE <= agg.mMAE
    assert agg.mMAE == pytest.approx(np.mean([max(e) for e in sets]), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(error_sets, st.integers(0, 11), st.floats(0.1, 30))
def test_auc_non_increasing_in_errors(sets, k, bump):
    evals = [ev(str(i), e) for i, e in enumerate(sets)]
    k %= len(sets)
    worse = list(evals)
    worse[k] = ev("w", np.asarray(sets[k]) + bump)
    assert aggregate(worse).AUC <= aggregate(evals).AUC


def test_mean_statistic_option():
    agg = aggregate([ev("a", [1.0, 30.0])], statistic="mean")
    assert agg.AUC == pytest.approx(10 / 25)


def test_pair_and_corner_errors():
    M = Homography(np.array([[1, 0, 3.0], [0, 1, 4.0], [0, 0, 1]]))
    np.testing.assert_allclose(metrics.pair_errors(M, [[0, 0], [10, 10]], [[0, 0], [13, 14]]), [5, 0])
    np.testing.assert_allclose(metrics.corner_errors(M, Homography(np.eye(3)), (64, 64)), [5] * 4)
    with pytest.raises(ValueError):
        metrics.pair_errors(M, [[0, 0]], [[0, 0], [1, 1]])


def test_ground_truth_round_trip(tmp_path):
    gt = metrics.GroundTruthPair("p", "m.png", "f.png", np.ones((3, 2)), np.zeros((3, 2)))
    metrics.write_ground_truth(tmp_path / "p.json", gt)
    back = metrics.read_ground_truth(tmp_path / "p.json")
    assert back.moving == "m.png" and np.array_equal(back.points_m, gt.points_m)


def test_overlay_channels():
    f = np.zeros((16, 16)); f[4, :] = 1
    m = np.zeros((16, 16)); m[:, 6] = 1
    out = metrics.overlay(f, m, Homography(np.eye(3)))
    assert out[4, 0, 1] == 255 and out[4, 0, 0] == 0
    assert out[0, 6, 0] == 255 and out[0, 6, 1] == 0


def test_write_report(tmp_path):
    res = {"synthetic": [ev("a", [1.0, 2.0]), PairEvaluation.failed("b")]}
    img = np.random.default_rng(0).random((32, 32))
    doc = metrics.write_report(tmp_path, res, overlays={"a": (img, img, Homography(np.eye(3)))})
    assert (tmp_path / "metrics.txt").read_text().startswith("dataset")
    saved = json.loads((tmp_path / "metrics.json").read_text())
    assert saved["threshold"] == 25 and saved["datasets"]["synthetic"]["failed"] == 1
    rows = (tmp_path / "curve_synthetic.csv").read_text().splitlines()
    assert len(rows) == 26 and rows[2] == "2,0.500000"
    assert (tmp_path / "overlay_a.png").exists() and doc["synthetic"]["per_pair"]["b"] is None
