import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vesselkp import geometry, matching, metrics
from vesselkp.geometry import HomographySamplerConfig
from vesselkp.matching import RegistrationError, estimate_homography, nnbf_match
from vesselkp.types import Homography

from oracles import nn_match_loop

FRAME = (256, 256)


def unit_rows(rng, n, d=16):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def as_tuples(m):
    return [(a, b, d) for a, b, d in m]


def test_identical_orthogonal_sets_match_identity():
    d = np.eye(5, 16)
    m = nnbf_match(None, d, None, d)
    assert [(a, b) for a, b, _ in m] == [(i, i) for i in range(5)]
    assert np.all(m.distance == 0)


def test_orthogonal_sets_give_no_matches():
    a, b = np.eye(16)[:4], np.eye(16)[4:9]
    assert len(nnbf_match(None, a, None, b, ratio=0.9)) == 0


def test_single_b_descriptor_skips_ratio_test(rng):
    m = nnbf_match(None, unit_rows(rng, 3), None, unit_rows(rng, 1))
    assert m.ratio_test_skipped and len(m) == 1
    with pytest.raises(ValueError):
        nnbf_match(None, np.zeros((0, 16)), None, unit_rows(rng, 2))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([None, 0.9, 0.7]), st.booleans())
def test_nnbf_matches_loop_oracle(seed, ratio, mutual):
    rng = np.random.default_rng(seed)
    a = unit_rows(rng, int(rng.integers(1, 20)))
    b = unit_rows(rng, int(rng.integers(1, 20)))
    got = nnbf_match(None, a, None, b, ratio, mutual)
    want = nn_match_loop(a, b, ratio, mutual)
    assert [(i, j) for i, j, _ in got] == [(i, j) for i, j, _ in want]
    np.testing.assert_allclose(got.distance, [d for _, _, d in want], atol=1e-12)


def test_nnbf_5x5_oracle(rng):
    a, b = unit_rows(rng, 5), unit_rows(rng, 5)
    got = nnbf_match(None, a, None, b)
    assert [(i, j) for i, j, _ in got] == [(i, j) for i, j, _ in nn_match_loop(a, b, 0.9, True)]


# ---------------------------------------------------------------- LMedS

def planted(rng, n=20, n_out=0, noise=0.0):
    H = geometry.sample_homography(HomographySamplerConfig(max_corner_shift=0.2), FRAME, rng)
    src = rng.uniform(0, 256, size=(n, 2))
    dst = geometry.transform_points(src, H)[0] + rng.normal(0, noise, size=(n, 2))
    out = rng.choice(n, n_out, replace=False)
    dst[out] = rng.uniform(0, 256, size=(n_out, 2))
    return H, src, dst, out


def corner_error(M, H):
    return float(metrics.corner_errors(M, H, FRAME).max())


def test_exact_correspondences_recover_matrix(rng):
    for _ in range(10):
        H, src, dst, _ = planted(rng, 8)
        fit = estimate_homography(src, dst)
        assert np.abs(fit.homography.matrix - H.matrix).max() / np.abs(H.matrix).max() < 1e-6
        assert fit.inliers.all() and fit.homography.provenance == "estimated"


def outlier_trials(n_trials=50, seed=0):
    rng = np.random.default_rng(seed)
    ok, excluded = 0, 0
    for _ in range(n_trials):
        H, src, dst, out = planted(rng, 20, 6)
        fit = estimate_homography(src, dst)
        ok += corner_error(fit.homography, H) < 1.0
        excluded += not fit.inliers[out].any()
    return ok, excluded


def test_thirty_percent_outliers():
    ok, excluded = outlier_trials()
    assert ok >= 48 and excluded >= 48


def test_outliers_with_inlier_noise(rng):
    good = 0
    for _ in range(20):
        H, src, dst, out = planted(rng, 40, 12, noise=0.3)
        good += corner_error(estimate_homography(src, dst).homography, H) < 1.5
    assert good >= 18


def test_too_few_matches():
    with pytest.raises(RegistrationError, match="insufficient correspondences"):
        estimate_homography(np.zeros((3, 2)), np.zeros((3, 2)))


def test_all_degenerate_samples():
    pts = np.stack([np.arange(10.0), 2 * np.arange(10.0)], 1)
    with pytest.raises(RegistrationError):
        estimate_homography(pts, pts)


def test_sample_count_rule():
    assert matching.lmeds_sample_count(0.5) == 72
    assert matching.lmeds_sample_count(0.9) == 2000


def test_order_and_scale_invariance(rng):
    H, src, dst, _ = planted(rng, 30, 9, noise=0.2)
    fit = estimate_homography(src, dst, seed=3)
    perm = rng.permutation(30)
    fit_p = estimate_homography(src[perm], dst[perm], seed=3)
    np.testing.assert_array_equal(fit.homography.matrix, fit_p.homography.matrix)
    np.testing.assert_array_equal(fit.inliers[perm], fit_p.inliers)
    s = 2.5
    fit_s = estimate_homography(src * s, dst * s, seed=3)
    S = np.diag([s, s, 1.0])
    conj = Homography(S @ fit.homography.matrix @ np.linalg.inv(S)).matrix
    np.testing.assert_allclose(fit_s.homography.matrix, conj, rtol=1e-9, atol=1e-9)


# ---------------------------------------------------------------- file formats

def test_match_and_homography_files(tmp_path, rng):
    m = nnbf_match(None, unit_rows(rng, 6), None, unit_rows(rng, 6), ratio=None)
    matching.write_matches(tmp_path / "m.json", "p1", m)
    got = matching.read_matches(tmp_path / "m.json")
    assert list(got) == ["p1"] and [tuple(r[:2]) for r in got["p1"]] == [(a, b) for a, b, _ in m]
    H = Homography(np.array([[1.1, 0.01, 3], [0.02, 0.95, -4], [1e-4, 2e-5, 1]]), "estimated")
    matching.write_homography(tmp_path / "h.json", H, "p1")
    assert matching.read_homography(tmp_path / "h.json") == H
    (tmp_path / "bad.json").write_text('{"pair": "x", "matches": [[1, 2]]}')
    with pytest.raises(ValueError):
        matching.read_matches(tmp_path / "bad.json")
