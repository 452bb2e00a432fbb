import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from vesselkp import geometry, losses
from vesselkp.losses import LossError, LossWeights
from vesselkp.types import DescriptorMap, Homography, KeypointSet

from gradcheck import check
from oracles import info_nce_loop



@pytest.fixture(autouse=True)
def float64_default():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# ---------------------------------------------------------------- dice

def test_dice_identical_binary_maps(rng):
    for _ in range(20):
        a = (rng.uniform(size=(16, 16)) < rng.uniform(0.01, 0.9)).astype(float)
        a[0, 0] = 1
        assert float(losses.dice_loss(a, a)) <= 2e-6


def test_dice_identical_soft_map_follows_formula(rng):
    a = rng.uniform(size=(16, 16))
    want = 1 - (2 * (a * a).sum() + 1e-6) / (2 * a.sum() + 1e-6)
    assert float(losses.dice_loss(a, a)) == pytest.approx(want, abs=1e-12)


def test_dice_disjoint_maps():
    a = np.zeros((8, 8)); a[:4] = 1
    b = np.zeros((8, 8)); b[4:] = 1
    assert float(losses.dice_loss(a, b)) >= 1 - 1e-5


def test_dice_half_prediction_is_one_third():
    t = np.zeros((20, 20)); t.flat[:100] = 1
    assert abs(float(losses.dice_loss(0.5 * t, t)) - 1 / 3) <= 1e-6


def test_dice_symmetric_and_bounded(rng):
    for _ in range(20):
        a, b = rng.uniform(size=(2, 8, 8))
        x, y = float(losses.dice_loss(a, b)), float(losses.dice_loss(b, a))
        assert x == pytest.approx(y, abs=1e-15) and 0 <= x <= 1


def test_dice_shape_mismatch():
    with pytest.raises(LossError):
        losses.dice_loss(np.zeros((4, 4)), np.zeros((4, 5)))


# ---------------------------------------------------------------- detector

def test_det_sup_examples():
    frame = (64, 64)
    Y = KeypointSet.from_points([[10, 10], [40, 20], [30, 50]], frame)
    G = geometry.render_heatmap(Y).values
    assert float(losses.det_sup_loss(G, Y)) < 1e-4
    assert float(losses.det_sup_loss(np.zeros(frame), Y)) > 1 - 1e-5
    shifted = KeypointSet.from_points(Y.coords + [20, 0], frame)
    assert float(losses.det_sup_loss(geometry.render_heatmap(shifted).values, Y)) > 1 - 1e-5
    with pytest.raises(LossError):
        losses.det_sup_loss(G, KeypointSet.empty(frame))


def test_det_self_examples():
    frame = (32, 32)
    assert float(losses.det_self_loss(np.full(frame, 0.3), KeypointSet.empty(frame))) == 0.0
    Y = KeypointSet.from_points([[3 * i + 1, 2 * i + 5] for i in range(10)], frame)
    G = geometry.render_heatmap(Y).values
    assert float(losses.det_self_loss(G, geometry.nms_extract(G, 0.5, 1))) < 1e-4
    P = np.full(frame, 0.5)
    want = 1 - (2 * (0.5 * G).sum() + 1e-6) / (P.sum() + G.sum() + 1e-6)
    assert float(losses.det_self_loss(P, Y)) == pytest.approx(want, abs=1e-12)


# ---------------------------------------------------------------- descriptor

def _orthogonal_map(n_pts, frame=(8, 8), dim=256):
    D = np.zeros(frame + (dim,))
    D[..., 0] = 1.0
    pts = [[1 + i, 2 + (i % 3)] for i in range(n_pts)]
    for k, (x, y) in enumerate(pts):
        D[y, x] = 0
        D[y, x, k + 1] = 1.0
    return D, KeypointSet.from_points(pts, frame)


def test_triplet_orthogonal_closed_form():
    for n in (2, 5):
        D, pts = _orthogonal_map(n)
        assert float(losses.descriptor_triplet_loss(D, D, pts, Homography.identity())) == 0.0


def test_triplet_collapse_gives_margin():
    D = np.zeros((8, 8, 256)); D[..., 3] = 1
    pts = KeypointSet.from_points([[1, 1], [4, 5], [6, 2]], (8, 8))
    assert float(losses.descriptor_triplet_loss(D, D, pts, Homography.identity(), 0.8)) == pytest.approx(0.8)


def test_triplet_needs_two_visible_points():
    D, pts = _orthogonal_map(2)
    with pytest.raises(LossError):
        losses.descriptor_triplet_loss(D, D, pts, Homography.translation(100, 0))


def test_triplet_nonnegative_and_hardest_negative(rng):
    for _ in range(20):
        a = torch.as_tensor(unit_rows(rng, 6, 8))
        p = torch.as_tensor(unit_rows(rng, 6, 8))
        got = float(losses.triplet_from_descriptors(a, p, 0.8))
        want = 0.0
        for i in range(6):
            j = max((k for k in range(6) if k != i), key=lambda k: float(a[i] @ p[k]))
            want += max(0.0, float((a[i] - p[i]).norm() - (a[i] - p[j]).norm()) + 0.8)
        assert got >= 0 and got == pytest.approx(want / 6, abs=1e-12)


# ---------------------------------------------------------------- segmentation

def test_seg_identity_and_round_trip(rng):
    from scipy import ndimage
    S = ndimage.gaussian_filter(rng.uniform(size=(64, 64)), 4)
    S = (S > np.median(S)).astype(float)
    assert float(losses.seg_consistency_loss(S, S, Homography.identity())) < 1e-6
    H = geometry.sample_homography(geometry.HomographySamplerConfig(seed=2), (64, 64))
    assert float(losses.seg_consistency_loss(S, geometry.warp_image(S, H), H)) < 0.05


def test_seg_independent_maps_expectation(rng):
    S, Sw = rng.uniform(size=(2, 256, 256))
    got = float(losses.seg_consistency_loss(S, Sw, Homography.identity()))
    want = 1 - 2 * S.mean() * Sw.mean() / (S.mean() + Sw.mean())
    assert got == pytest.approx(want, abs=0.01)


def test_seg_degenerate_overlap_errors():
    with pytest.raises(LossError):
        losses.seg_consistency_loss(np.ones((32, 32)), np.ones((32, 32)), Homography.translation(30, 30))


# ---------------------------------------------------------------- contrastive

def test_ssl_closed_forms():
    e = np.array([[1.0, 0, 0]])
    assert abs(float(losses.ssl_contrastive_loss(e, e, e, e, 0.07)) - math.log(2)) <= 1e-9
    n = np.array([[0, 1.0, 0]])
    assert abs(float(losses.ssl_contrastive_loss(e, e, n, n, 1.0)) - (math.log(2) - 1)) <= 1e-9


def test_ssl_matches_double_loop(rng):
    for _ in range(100):
        nb, nr, nrw = rng.integers(1, 9, size=3)
        d = int(rng.integers(2, 10))
        b, bw = rng.normal(size=(2, nb, d))
        r, rw = rng.normal(size=(nr, d)), rng.normal(size=(nrw, d))
        t = float(rng.uniform(0.05, 2))
        got = float(losses.ssl_contrastive_loss(b, bw, r, rw, t))
        assert abs(got - info_nce_loop(b.tolist(), bw.tolist(), r.tolist(), rw.tolist(), t)) <= 1e-10


def test_ssl_row_scale_invariance(rng):
    b, bw, r, rw = rng.normal(size=(4, 5, 6))
    base = float(losses.ssl_contrastive_loss(b, bw, r, rw))
    s = rng.uniform(0.1, 10, size=(5, 1))
    assert float(losses.ssl_contrastive_loss(b * s, bw, r * s, rw)) == pytest.approx(base, abs=1e-10)


def test_ssl_errors():
    e = np.ones((2, 3))
    with pytest.raises(LossError):
        losses.ssl_contrastive_loss(e, e, np.zeros((0, 3)), e)
    with pytest.raises(LossError):
        losses.ssl_contrastive_loss(e, e, np.zeros((1, 3)), e)
    with pytest.raises(LossError):
        losses.ssl_contrastive_loss(e, e[:1], e, e)
    with pytest.raises(LossError):
        losses.ssl_contrastive_loss(e, e, e, e, 0)


# ---------------------------------------------------------------- total

def test_total_loss():
    comps = dict(zip(losses.LOSS_NAMES, map(torch.tensor, (1.0, 2.0, 3.0, 4.0, 5.0))))
    assert float(losses.total_loss(comps)) == 15
    assert float(losses.total_loss({k: torch.tensor(0.0) for k in losses.LOSS_NAMES})) == 0
    assert float(losses.total_loss(comps, LossWeights(w_ssl=0))) == 10
    comps["seg"] = torch.tensor(float("nan"))
    with pytest.raises(LossError, match="seg"):
        losses.total_loss(comps)
    assert LossWeights(w_des=-1).validate()


# ---------------------------------------------------------------- gradients

def _smooth_map(rng, shape=(8, 8)):
    return torch.as_tensor(rng.uniform(0.05, 0.95, size=shape))


def gradient_errors(seed=0):
    """Relative FD error of every loss w.r.t. its array inputs on 8x8 instances."""
    rng = np.random.default_rng(seed)
    frame = (8, 8)
    Y = KeypointSet.from_points([[1, 2], [5, 5], [6, 1]], frame)
    errs = {}
    tgt = _smooth_map(rng)
    errs["dice"] = check(lambda p: losses.dice_loss(p, tgt), _smooth_map(rng))
    errs["det_sup"] = check(lambda p: losses.det_sup_loss(p, Y, 1.0, 5), _smooth_map(rng))
    errs["det_self"] = check(lambda p: losses.det_self_loss(p, Y, 1.0, 5), _smooth_map(rng))

    Dw = torch.as_tensor(rng.normal(size=(8, 8, 4)))
    H = Homography(np.array([[1, 0.02, 0.3], [-0.01, 1, 0.2], [0, 0, 1]]))
    pts = KeypointSet.from_points([[1.3, 2.2], [4.6, 5.1], [5.5, 1.7], [2.2, 4.4]], frame)
    errs["des"] = check(lambda d: losses.descriptor_triplet_loss(d, Dw, pts, H, 0.8),
                        torch.as_tensor(rng.normal(size=(8, 8, 4))))
    D0 = torch.as_tensor(rng.normal(size=(8, 8, 4)))
    errs["des_warped"] = check(lambda d: losses.descriptor_triplet_loss(D0, d, pts, H, 0.8), Dw)

    Hs = Homography(np.array([[1, 0.01, 0.4], [0.0, 1, -0.3], [0, 0, 1]]))
    Sw = _smooth_map(rng)
    errs["seg"] = check(lambda s: losses.seg_consistency_loss(s, Sw, Hs), _smooth_map(rng))
    S0 = _smooth_map(rng)
    errs["seg_warped"] = check(lambda s: losses.seg_consistency_loss(S0, s, Hs), Sw)

    g = [torch.as_tensor(rng.normal(size=(3, 8))) for _ in range(4)]
    for k, name in enumerate(("ssl_b", "ssl_bw", "ssl_r", "ssl_rw")):
        def f(x, k=k):
            args = list(g)
            args[k] = x
            return losses.ssl_contrastive_loss(*args, temperature=0.5)
        errs[name] = check(f, g[k])
    return errs


def test_loss_gradients_match_finite_differences():
    errs = gradient_errors()
    bad = {k: v for k, v in errs.items() if not v < 1e-4}
    assert not bad, bad
