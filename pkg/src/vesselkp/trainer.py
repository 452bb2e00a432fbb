"""Iterative keypoint training: five losses, candidate feedback and progressive label expansion."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import geometry, losses
from .data import Sample, color_jitter
from .geometry import HomographySamplerConfig
from .losses import LossWeights
from .network import ModelState, NetworkConfig, build_state, save_checkpoint
from .types import Homography, KeypointSet

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 2
    learning_rate: float = 1e-4
    max_epochs: int = 150
    optimizer: str = "adam"
    lr_schedule: str = "constant"       # or "cosine"
    nms_threshold: float = 0.5
    nms_radius: int = 10
    consistency_tol: float = 0.5
    expansion_min_separation: Optional[float] = None  # defaults to nms_radius
    heatmap_sigma: float = 0.2
    heatmap_kernel: int = 13
    triplet_margin: float = 0.8
    temperature: float = 0.07
    jitter_strength: float = 0.3
    candidate_cap: int = 1024
    cross_modal_prob: float = 0.0       # chance the warped branch uses the partner modality
    supervise_warped: bool = True
    iterative: bool = True              # refresh candidates from each step's detections
    pke: bool = True
    checkpoint_every: int = 10
    repeat_tol: float = 3.0
    deterministic: bool = False
    seed: int = 0
    homography: HomographySamplerConfig = HomographySamplerConfig()

    @property
    def min_separation(self):
        return self.nms_radius if self.expansion_min_separation is None else self.expansion_min_separation

    def validate(self):
        if self.batch_size < 2:
            return "batch_size must be >= 2"
        if not self.learning_rate > 0:
            return "learning_rate must be > 0"
        if self.optimizer != "adam":
            return "only the 'adam' optimizer is supported"
        if self.lr_schedule not in ("constant", "cosine"):
            return "lr_schedule must be 'constant' or 'cosine'"
        if not 0 < self.nms_threshold < 1:
            return "nms_threshold must lie in (0, 1)"
        if self.max_epochs < 0:
            return "max_epochs must be >= 0"
        return self.homography.validate()


def set_deterministic(seed: int):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def _nms(P, cfg: TrainConfig) -> KeypointSet:
    return geometry.nms_extract(P, cfg.nms_threshold, cfg.nms_radius)


def init_state(samples: Sequence[Sample], net_cfg: NetworkConfig, cfg: TrainConfig) -> ModelState:
    state = build_state(net_cfg, cfg.seed)
    for s in samples:
        if s.labeled:
            state.original_labels[s.image_id] = s.labels
            state.expanded_labels[s.image_id] = s.labels
            state.candidates[s.image_id] = s.labels
        else:
            state.candidates[s.image_id] = KeypointSet.empty(s.image.shape[:2])
    state.optimizer = torch.optim.Adam(list(state.net.parameters()) + list(state.seg_net.parameters()),
                                       lr=cfg.learning_rate)
    return state


@dataclass
class _Branches:
    H: Homography
    cand_o: KeypointSet
    cand_w: KeypointSet
    warped_img: np.ndarray


def _prepare(sample: Sample, state: ModelState, cfg: TrainConfig, rng, lookup) -> _Branches:
    frame = sample.image.shape[:2]
    H = geometry.sample_homography(cfg.homography, frame, rng)
    src = sample.image
    if sample.partner is not None and sample.partner in lookup and rng.random() < cfg.cross_modal_prob:
        src = lookup[sample.partner].image
    warped = geometry.warp_image(src, H)
    warped = color_jitter(warped, cfg.jitter_strength, int(rng.integers(2 ** 31)))
    cands = state.candidates.get(sample.image_id)
    if cands is None:
        cands = sample.labels if sample.labeled else KeypointSet.empty(frame)
    cands = cands.top_k(cfg.candidate_cap)
    cand_w, keep = geometry.warp_keypoints(cands, H)
    return _Branches(H, cands.subset(keep), cand_w, warped.astype(np.float32))


def train_step(state: ModelState, batch: Sequence[Sample], cfg: TrainConfig,
               weights: LossWeights = LossWeights(), rng=None, lookup=None):
    """One optimizer update over ``batch``; returns (state, per-image loss records).

    The candidate cache of every image is replaced by the NMS of the
    probability map predicted in this step.
    """
    if len({s.subject for s in batch}) != len(batch):
        raise TrainingError("distinct subjects required in a batch")
    if len(batch) < 2:
        raise TrainingError("a batch needs at least 2 images")
    rng = np.random.default_rng(state.iteration) if rng is None else rng
    lookup = lookup or {}
    net, seg = state.net, state.seg_net
    net.train()
    seg.train()
    dtype = next(net.parameters()).dtype
    prep = [_prepare(s, state, cfg, rng, lookup) for s in batch]
    x = torch.as_tensor(np.stack([s.image for s in batch])[:, None], dtype=dtype)
    xw = torch.as_tensor(np.stack([p.warped_img for p in prep])[:, None], dtype=dtype)
    levels, emb = net.encode(x, [p.cand_o.coords for p in prep])
    levels_w, emb_w = net.encode(xw, [p.cand_w.coords for p in prep])
    P = net.detect(levels)
    Pw = net.detect(levels_w)
    P_np = P.detach().double().numpy()[:, 0]
    Pw_np = Pw.detach().double().numpy()[:, 0]

    S = Sw = None
    if weights.w_seg > 0:
        hm = np.stack([geometry.render_heatmap(p.cand_o, cfg.heatmap_sigma, cfg.heatmap_kernel).values for p in prep])
        hmw = np.stack([geometry.render_heatmap(p.cand_w, cfg.heatmap_sigma, cfg.heatmap_kernel).values for p in prep])
        S = seg(x, torch.as_tensor(hm[:, None], dtype=dtype))
        Sw = seg(xw, torch.as_tensor(hmw[:, None], dtype=dtype))

    sig, ker = cfg.heatmap_sigma, cfg.heatmap_kernel
    per_image = []
    detections = []
    for b, (s, p) in enumerate(zip(batch, prep)):
        comps = {}
        if s.labeled:
            labels = state.expanded_labels.get(s.image_id, s.labels)
            sup = losses.det_sup_loss(P[b, 0], labels, sig, ker)
            if cfg.supervise_warped:
                lw, _ = geometry.warp_keypoints(labels, p.H)
                if len(lw):
                    sup = 0.5 * (sup + losses.det_sup_loss(Pw[b, 0], lw, sig, ker))
            comps["det_sup"] = sup
        Y = _nms(P_np[b], cfg)
        detections.append(Y)
        Yw = _nms(Pw_np[b], cfg)
        back, ok = geometry.transform_points(Yw, p.H.inverse())
        Y_hat = geometry.filter_consistent(Y, back[ok], cfg.consistency_tol)
        comps["det_self"] = losses.det_self_loss(P[b, 0], Y_hat, sig, ker)

        pts = state.expanded_labels.get(s.image_id) if s.labeled else p.cand_o
        comps["des"] = _descriptor_term(net, levels, levels_w, b, pts, p.H, cfg)
        if S is not None:
            comps["seg"] = losses.seg_consistency_loss(S[b, 0], Sw[b, 0], p.H)
        else:
            comps["seg"] = P.new_zeros(())
        comps["ssl"] = P.new_zeros(())
        if weights.w_ssl > 0 and net.cfg.fusion:
            r = (b + 1) % len(batch)
            if min(len(emb[b]), len(emb_w[b]), len(emb[r]), len(emb_w[r])) > 0:
                comps["ssl"] = losses.ssl_contrastive_loss(emb[b], emb_w[b], emb[r], emb_w[r], cfg.temperature)
        per_image.append(comps)

    records = []
    try:
        totals = [losses.total_loss(c, weights) for c in per_image]
    except losses.LossError as exc:
        log.warning("step %d aborted: %s", state.iteration, exc)
        return state, [{"step": state.iteration, "error": str(exc)}]
    total = sum(t if isinstance(t, torch.Tensor) else P.new_tensor(t) for t in totals) / len(batch)
    if not torch.isfinite(total):
        log.warning("step %d aborted: non-finite total loss", state.iteration)
        return state, [{"step": state.iteration, "error": "non-finite total loss"}]

    # every active term can be constant (e.g. unlabeled images with only det_sup weighted)
    if total.requires_grad:
        state.optimizer.zero_grad(set_to_none=True)
        total.backward()
        state.optimizer.step()

    for s, comps, t, Y in zip(batch, per_image, totals, detections):
        rec = {"step": state.iteration, "epoch": state.epoch, "image_id": s.image_id}
        for name in losses.LOSS_NAMES:
            if name in comps:
                rec[name] = float(comps[name].detach())
        rec["total"] = float(t.detach()) if isinstance(t, torch.Tensor) else float(t)
        records.append(rec)
        if cfg.iterative:
            state.candidates[s.image_id] = Y.top_k(cfg.candidate_cap)
    state.iteration += 1
    return state, records


def _descriptor_term(net, levels, levels_w, b, pts, H, cfg):
    zero = levels[0].new_zeros(())
    if pts is None or len(pts) < 2:
        return zero
    warped, ok = geometry.transform_points(pts, H)
    keep = ok & geometry.in_frame(warped, levels[0].shape[-2:])
    if keep.sum() < 2:
        return zero
    a = net.describe_points(levels, pts.coords[keep], b)
    p = net.describe_points(levels_w, warped[keep], b)
    return losses.triplet_from_descriptors(a, p, cfg.triplet_margin)


# ---------------------------------------------------------------------------
# progressive keypoint expansion


def expand_labels(state: ModelState, image_id: str, detections: KeypointSet, labels: KeypointSet,
                  H, cfg: TrainConfig, warped_detections: KeypointSet) -> KeypointSet:
    """Grow ``labels`` with detections that are consistent under ``H`` and far from existing labels.

    A detection is consistent when some detection on the warped image maps
    back (through H^-1) to within ``consistency_tol`` px of it.
    """
    if len(detections) == 0:
        return labels
    Hm = H if isinstance(H, Homography) else Homography(H)
    back, ok = geometry.transform_points(warped_detections, Hm.inverse())
    consistent = geometry.filter_consistent(detections, back[ok], cfg.consistency_tol)
    if len(consistent) == 0:
        return labels
    current = labels
    for i in range(len(consistent)):
        pt = consistent.coords[i]
        if len(current):
            d = np.sqrt(((current.coords - pt) ** 2).sum(1)).min()
            if not d > cfg.min_separation:
                continue
        current = current.union(consistent.subset([i]))
    return current


@torch.no_grad()
def predict(state: ModelState, images, passes: int = 2, nms_threshold=0.5, nms_radius=10,
            candidates=None):
    """Probability maps for a list of working-size images (eval mode).

    With fusion enabled the first pass runs without candidates and later
    passes feed back the previous pass's NMS detections, mirroring training.
    """
    net = state.net.eval()
    dtype = next(net.parameters()).dtype
    x = torch.as_tensor(np.stack([np.asarray(i, np.float64) for i in images])[:, None], dtype=dtype)
    cands = candidates
    if not net.cfg.fusion:
        passes = 1
    levels = None
    for k in range(max(1, passes)):
        coords = None if cands is None else [c.coords for c in cands]
        levels, _ = net.encode(x, coords)
        P = net.detect(levels).double().numpy()[:, 0]
        if k + 1 < passes:
            cands = [geometry.nms_extract(p, nms_threshold, nms_radius).top_k(1024) for p in P]
    return P, levels


def pke_sweep(state: ModelState, samples: Sequence[Sample], cfg: TrainConfig, rng, passes=2):
    """Run one expansion pass over the labeled samples; returns an audit trail per image."""
    audit = []
    for s in samples:
        if not s.labeled:
            continue
        H = geometry.sample_homography(cfg.homography, s.image.shape[:2], rng)
        warped = geometry.warp_image(s.image, H)
        P, _ = predict(state, [s.image, warped], passes, cfg.nms_threshold, cfg.nms_radius)
        det = _nms(P[0], cfg)
        det_w = _nms(P[1], cfg)
        before = state.expanded_labels[s.image_id]
        after = expand_labels(state, s.image_id, det, before, H, cfg, det_w)
        state.expanded_labels[s.image_id] = after
        audit.append({"epoch": state.epoch, "image_id": s.image_id, "H": H.matrix.tolist(),
                      "before": len(before), "after": len(after),
                      "added": after.coords[len(before):].tolist(),
                      "warped_detections": det_w.coords.tolist()})
    return audit


# ---------------------------------------------------------------------------
# evaluation helpers


def repeatability(state: ModelState, samples: Sequence[Sample], cfg: TrainConfig, seed: int = 1234,
                  tol: Optional[float] = None, passes: int = 2) -> float:
    """Mean fraction of detections re-detected within ``tol`` px under a random homography.

    Only detections whose counterpart location lies inside the other frame
    count. An image with no such detections scores 0. Homographies depend
    only on ``seed``, so repeated calls compare like with like.
    """
    tol = cfg.repeat_tol if tol is None else tol
    rng = np.random.default_rng(seed)
    scores = []
    for s in samples:
        frame = s.image.shape[:2]
        H = geometry.sample_homography(cfg.homography, frame, rng)
        P, _ = predict(state, [s.image, geometry.warp_image(s.image, H)], passes,
                       cfg.nms_threshold, cfg.nms_radius)
        A = _nms(P[0], cfg).coords
        B = _nms(P[1], cfg).coords
        A_w, okA = geometry.transform_points(A, H)
        B_b, okB = geometry.transform_points(B, H.inverse())
        A_vis = okA & geometry.in_frame(A_w, frame)
        B_vis = okB & geometry.in_frame(B_b, frame)
        n = A_vis.sum() + B_vis.sum()
        if n == 0 or len(A) == 0 or len(B) == 0:
            scores.append(0.0)
            continue
        dA = np.sqrt(((A_w[A_vis][:, None] - B[None]) ** 2).sum(-1)).min(1)
        dB = np.sqrt(((B_b[B_vis][:, None] - A[None]) ** 2).sum(-1)).min(1)
        scores.append(float(((dA <= tol).sum() + (dB <= tol).sum()) / n))
    return float(np.mean(scores)) if scores else 0.0


def make_batches(samples: Sequence[Sample], batch_size: int, rng) -> list:
    """Shuffle into batches whose members all come from distinct subjects."""
    order = list(rng.permutation(len(samples)))
    batches, open_ = [], []
    for i in order:
        placed = False
        for bt in open_:
            if all(samples[j].subject != samples[i].subject for j in bt):
                bt.append(i)
                placed = True
                if len(bt) == batch_size:
                    batches.append(bt)
                    open_.remove(bt)
                break
        if not placed:
            open_.append([i])
    subjects = {s.subject for s in samples}
    for bt in open_:
        if len(subjects) < batch_size:
            break
        pool = [j for j in rng.permutation(len(samples))
                if samples[j].subject not in {samples[k].subject for k in bt}]
        for j in pool:
            if samples[j].subject not in {samples[k].subject for k in bt}:
                bt.append(int(j))
            if len(bt) == batch_size:
                batches.append(bt)
                break
    return [[samples[j] for j in bt] for bt in batches]


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)     # per-epoch summaries
    pke: list = field(default_factory=list)        # expansion audit trail
    label_counts: dict = field(default_factory=dict)  # image id -> [count per epoch]
    checkpoints: list = field(default_factory=list)
    aborted_steps: int = 0

    def to_dict(self):
        return asdict(self)


def train(samples: Sequence[Sample], cfg: TrainConfig = TrainConfig(),
          net_cfg: NetworkConfig = NetworkConfig(), weights: LossWeights = LossWeights(),
          val: Optional[Sequence[Sample]] = None, run_dir=None, state: Optional[ModelState] = None,
          on_epoch: Optional[Callable] = None):
    """Train from scratch (or continue ``state``); returns (state, TrainReport).

    Writes ``loss_log.jsonl`` and checkpoints into ``run_dir`` when given.
    """
    bad = cfg.validate() or net_cfg.validate() or weights.validate()
    if bad:
        raise ValueError(bad)
    if not samples:
        raise TrainingError("empty dataset")
    if not any(s.labeled for s in samples):
        raise TrainingError("at least one labeled image is required to anchor L_det_sup")
    if cfg.deterministic:
        set_deterministic(cfg.seed)
    state = state or init_state(samples, net_cfg, cfg)
    state.extra.update(heatmap_sigma=cfg.heatmap_sigma, nms_threshold=cfg.nms_threshold,
                       nms_radius=cfg.nms_radius)
    lookup = {s.image_id: s for s in samples}
    report = TrainReport()
    run_dir = Path(run_dir) if run_dir else None
    log_f = None
    if run_dir:
        run_dir.mkdir(parents=True, exist_ok=True)
        log_f = open(run_dir / "loss_log.jsonl", "a")
    for s in samples:
        if s.labeled:
            report.label_counts[s.image_id] = [len(state.expanded_labels[s.image_id])]
    best = -1.0
    if val:
        rep0 = repeatability(state, val, cfg)
        report.epochs.append({"epoch": 0, "repeatability": rep0})
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            state.epoch = epoch
            if cfg.lr_schedule == "cosine":
                lr = 0.5 * cfg.learning_rate * (1 + math.cos(math.pi * (epoch - 1) / max(cfg.max_epochs, 1)))
                for g in state.optimizer.param_groups:
                    g["lr"] = lr
            rng = np.random.default_rng([cfg.seed, epoch])
            t0 = time.time()
            sums: dict = {}
            counts: dict = {}
            for batch in make_batches(samples, cfg.batch_size, rng):
                state, records = train_step(state, batch, cfg, weights, rng, lookup)
                for rec in records:
                    if "error" in rec:
                        report.aborted_steps += 1
                    else:
                        for k in losses.LOSS_NAMES + ("total",):
                            if k in rec:
                                sums[k] = sums.get(k, 0.0) + rec[k]
                                counts[k] = counts.get(k, 0) + 1
                    if log_f:
                        log_f.write(json.dumps(rec) + "\n")
            if log_f:
                log_f.flush()
            summary = {"epoch": epoch, "seconds": round(time.time() - t0, 3)}
            summary.update({k: sums[k] / counts[k] for k in sorted(sums)})
            if cfg.pke:
                report.pke.extend(pke_sweep(state, samples, cfg, rng))
            for key in report.label_counts:
                report.label_counts[key].append(len(state.expanded_labels[key]))
            if val:
                summary["repeatability"] = repeatability(state, val, cfg)
            report.epochs.append(summary)
            log.info("epoch %d %s", epoch, summary)
            if run_dir:
                if epoch % max(cfg.checkpoint_every, 1) == 0 or epoch == cfg.max_epochs:
                    path = run_dir / f"ckpt_epoch{epoch:03d}.pt"
                    save_checkpoint(path, state)
                    report.checkpoints.append(str(path))
                if val and summary["repeatability"] > best:
                    best = summary["repeatability"]
                    save_checkpoint(run_dir / "best.pt", state, {"repeatability": best})
            if on_epoch:
                on_epoch(state, summary)
    finally:
        if log_f:
            log_f.close()
    return state, report
