import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from vesselkp import geometry, trainer
from vesselkp.data import phantom_dataset
from vesselkp.geometry import HomographySamplerConfig
from vesselkp.losses import LossWeights
from vesselkp.network import NetworkConfig
from vesselkp.trainer import TrainConfig, TrainingError
from vesselkp.types import Homography, KeypointSet

TINY = NetworkConfig(channels=(4, 8, 8, 8), embed_dim=8, attention_heads=2, working_size=(64, 64),
                     seg_channels=(4, 4, 4), detector_prior=0.5)
FAST = TrainConfig(max_epochs=2, learning_rate=1e-3, nms_threshold=0.45, nms_radius=2, heatmap_sigma=1.0,
                   heatmap_kernel=7, candidate_cap=32, homography=HomographySamplerConfig(max_corner_shift=0.1))


def samples(n=3, labeled=2):
    return phantom_dataset(n, (64, 64), labeled_subjects=labeled, seed=4)


def test_batches_need_distinct_subjects():
    s = samples()
    st_ = trainer.init_state(s, TINY, FAST)
    with pytest.raises(TrainingError, match="distinct subjects"):
        trainer.train_step(st_, [s[0], s[1]], FAST)
    with pytest.raises(TrainingError):
        trainer.train_step(st_, [s[0]], FAST)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 9), st.integers(1, 3), st.integers(2, 4), st.integers(0, 999))
def test_make_batches_distinct_and_complete(n_sub, n_styles, bs, seed):
    s = [type("S", (), {"subject": f"s{i}", "k": i * n_styles + j})() for i in range(n_sub) for j in range(n_styles)]
    batches = trainer.make_batches(s, bs, np.random.default_rng(seed))
    for b in batches:
        assert len({x.subject for x in b}) == len(b) == bs
    if n_sub >= bs:
        assert {x.k for b in batches for x in b} == set(range(len(s)))


def test_training_requires_a_label():
    with pytest.raises(TrainingError, match="L_det_sup"):
        trainer.train(samples(2, 0), FAST, TINY)


def consistent_under(pt, warped_dets, H, tol):
    back, ok = geometry.transform_points(np.asarray(warped_dets).reshape(-1, 2), np.linalg.inv(H))
    return ok.any() and np.sqrt(((back[ok] - pt) ** 2).sum(1)).min() <= tol


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_expand_labels_adds_only_consistent_far_points(seed):
    rng = np.random.default_rng(seed)
    cfg = TrainConfig(nms_radius=3)
    H = geometry.sample_homography(HomographySamplerConfig(max_corner_shift=0.1), (64, 64), rng)
    det = KeypointSet.from_points(rng.uniform(0, 63, (12, 2)), (64, 64))
    mapped, ok = geometry.transform_points(det.coords, H)
    jitter = rng.choice([0.0, 0.3, 2.0], size=(len(det), 1)) * rng.normal(size=(len(det), 2)) / np.sqrt(2)
    warped = mapped[ok] + jitter[ok]
    labels = KeypointSet.from_points(rng.uniform(0, 63, (3, 2)), (64, 64))
    out = trainer.expand_labels(None, "x", det, labels, H, cfg, KeypointSet.from_points(warped, (64, 64)))
    assert np.array_equal(out.coords[:3], labels.coords)
    for i, p in enumerate(out.coords[3:], start=3):
        assert consistent_under(p, warped, H.matrix, cfg.consistency_tol)
        assert np.sqrt(((out.coords[:i] - p) ** 2).sum(1)).min() > cfg.min_separation


def test_pke_nested_and_audited(tmp_path):
    s = samples()
    snapshots = []
    cfg = FAST.__class__(**{**FAST.__dict__, "max_epochs": 3})
    state, report = trainer.train(s, cfg, TINY, LossWeights(w_seg=0, w_ssl=0), run_dir=tmp_path,
                                  on_epoch=lambda st_, _: snapshots.append(
                                      {k: v.coords.copy() for k, v in st_.expanded_labels.items()}))
    for counts in report.label_counts.values():
        assert all(a <= b for a, b in zip(counts, counts[1:]))
    for prev, cur in zip(snapshots, snapshots[1:]):
        for k in prev:
            assert np.array_equal(cur[k][:len(prev[k])], prev[k])
    for row in report.pke:
        H = np.asarray(row["H"])
        for p in row["added"]:
            assert consistent_under(np.asarray(p), row["warped_detections"], H, 0.5)
    lines = (tmp_path / "loss_log.jsonl").read_text().splitlines()
    assert lines and all("step" in json.loads(l) for l in lines)
    assert [p.endswith("ckpt_epoch003.pt") for p in report.checkpoints] == [True]


def test_train_step_updates_candidates_and_logs_terms():
    s = samples()
    state = trainer.init_state(s, TINY, FAST)
    before = [p.detach().clone() for p in state.net.parameters()]
    state, recs = trainer.train_step(state, [s[0], s[4]], FAST, LossWeights(), np.random.default_rng(0),
                                     {x.image_id: x for x in s})
    assert {"det_sup", "det_self", "des", "seg", "ssl", "total"} <= set(recs[0])
    assert "det_sup" not in recs[1]
    assert any(not torch.equal(a, b) for a, b in zip(before, state.net.parameters()))
    assert state.iteration == 1


def test_deterministic_runs_identical(tmp_path):
    s = samples()
    cfg = TrainConfig(**{**FAST.__dict__, "deterministic": True, "seed": 7})
    for d in ("a", "b"):
        trainer.train(s, cfg, TINY, run_dir=tmp_path / d)
    assert (tmp_path / "a/loss_log.jsonl").read_bytes() == (tmp_path / "b/loss_log.jsonl").read_bytes()
    torch.use_deterministic_algorithms(False)


def test_repeatability_perfect_for_identity():
    s = samples(1, 1)[:1]
    state = trainer.init_state(s, TINY, FAST)
    cfg = TrainConfig(**{**FAST.__dict__, "homography": HomographySamplerConfig(
        max_corner_shift=0, rotation_range=0, scale_range=(1, 1), translation_range=0)})
    r = trainer.repeatability(state, s, cfg)
    assert r in (0.0, 1.0)


def test_step_with_only_constant_terms_does_not_update():
    s = samples(4, labeled=1)
    state = trainer.init_state(s, TINY, FAST)
    before = [p.detach().clone() for p in state.net.parameters()]
    w = LossWeights(w_det_self=0, w_des=0, w_seg=0, w_ssl=0)
    state, recs = trainer.train_step(state, [s[4], s[6]], FAST, w, np.random.default_rng(0),
                                     {x.image_id: x for x in s})
    assert all("det_sup" not in r and "error" not in r for r in recs)
    assert all(torch.equal(a, b) for a, b in zip(before, state.net.parameters()))
    assert state.iteration == 1
