"""Training objectives: detector Dice terms, descriptor triplet, segmentation consistency, keypoint InfoNCE.

All losses take torch tensors (numpy arrays and domain values are converted)
and return a 0-d tensor so they can be back-propagated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F

from . import geometry
from .types import DescriptorMap, KeypointEmbedding, KeypointSet, ScalarMap

DICE_EPS = 1e-6
LOSS_NAMES = ("det_sup", "det_self", "des", "seg", "ssl")


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    w_det_sup: float = 1.0
    w_det_self: float = 1.0
    w_des: float = 1.0
    w_seg: float = 1.0
    w_ssl: float = 1.0

    def validate(self):
        for f in fields(self):
            if not getattr(self, f.name) >= 0:
                return f"{f.name} must be >= 0"
        return None

    def as_dict(self):
        return {name: getattr(self, f"w_{name}") for name in LOSS_NAMES}


def _t(x, dtype=None) -> torch.Tensor:
    if isinstance(x, (ScalarMap, DescriptorMap)):
        x = x.values
    elif isinstance(x, KeypointEmbedding):
        x = x.per_point
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.tensor(np.asarray(x), dtype=dtype or torch.float64)


def dice_loss(pred, target, mask=None, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft Dice: 1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps)."""
    p = _t(pred)
    t = _t(target, p.dtype).to(p.device)
    if p.shape != t.shape:
        raise LossError(f"shape mismatch {tuple(p.shape)} vs {tuple(t.shape)}")
    if mask is not None:
        m = _t(mask, p.dtype).to(p.device)
        p, t = p * m, t * m
    inter = (p * t).sum()
    return 1.0 - (2.0 * inter + eps) / (p.sum() + t.sum() + eps)


def det_sup_loss(P, Y: KeypointSet, sigma: float = 0.2, kernel: int = 13) -> torch.Tensor:
    if len(Y) == 0:
        raise LossError("supervised detector loss requires at least one label")
    p = _t(P)
    G = geometry.render_heatmap(Y, sigma, kernel, frame=tuple(p.shape[-2:])).values
    return dice_loss(p, torch.tensor(G, dtype=p.dtype, device=p.device).expand_as(p))


def det_self_loss(P, Y_hat: KeypointSet, sigma: float = 0.2, kernel: int = 13) -> torch.Tensor:
    p = _t(P)
    if len(Y_hat) == 0:
        return p.sum() * 0.0
    G = geometry.render_heatmap(Y_hat, sigma, kernel, frame=tuple(p.shape[-2:])).values
    return dice_loss(p, torch.tensor(G, dtype=p.dtype, device=p.device).expand_as(p))


def sample_descriptors(D: torch.Tensor, xy) -> torch.Tensor:
    """Bilinearly sample an (H, W, C) map at (N, 2) pixel coords and renormalize rows."""
    H, W = D.shape[:2]
    xy = torch.tensor(np.asarray(xy), dtype=D.dtype, device=D.device).reshape(-1, 2)
    grid = torch.stack([2 * xy[:, 0] / max(W - 1, 1) - 1, 2 * xy[:, 1] / max(H - 1, 1) - 1], -1)
    out = F.grid_sample(D.permute(2, 0, 1)[None], grid[None, None], mode="bilinear",
                        padding_mode="border", align_corners=True)
    return F.normalize(out[0, :, 0].T, dim=1, eps=1e-12)


def descriptor_triplet_loss(D, D_w, pts: KeypointSet, H, margin: float = 0.8) -> torch.Tensor:
    """Hinge triplet loss with the hardest in-set negative for each anchor.

    Anchor a_i = D(pts_i), positive p_i = D_w(H(pts_i)); the negative of
    anchor i is the positive p_j (j != i) most similar to a_i.
    """
    D = _t(D)
    D_w = _t(D_w, D.dtype)
    frame = tuple(D_w.shape[:2])
    warped, valid = geometry.transform_points(pts, H)
    keep = valid & geometry.in_frame(warped, frame)
    if keep.sum() < 2:
        raise LossError("triplet loss needs at least 2 points visible in both frames")
    a = sample_descriptors(D, pts.coords[keep])
    p = sample_descriptors(D_w, warped[keep])
    return triplet_from_descriptors(a, p, margin)


def triplet_from_descriptors(a: torch.Tensor, p: torch.Tensor, margin: float = 0.8) -> torch.Tensor:
    """Triplet hinge on already-sampled unit descriptors: row i of ``a`` matches row i of ``p``."""
    if len(a) < 2:
        raise LossError("triplet loss needs at least 2 points")
    sim = a @ p.T
    n = len(a)
    sim = sim.masked_fill(torch.eye(n, dtype=torch.bool, device=sim.device), -math.inf)
    p_neg = p[sim.argmax(dim=1)]
    d_pos = (a - p).norm(dim=1)
    d_neg = (a - p_neg).norm(dim=1)
    return F.relu(d_pos - d_neg + margin).mean()


def seg_consistency_loss(S, S_w, H, min_valid: float = 0.1) -> torch.Tensor:
    """Dice between S and S_w brought back through H^-1, on the region seen by both."""
    S = _t(S)
    S_w = _t(S_w, S.dtype)
    frame = tuple(S.shape[-2:])
    Hm = H.matrix if hasattr(H, "matrix") else np.asarray(H, np.float64)
    mask = geometry.valid_region(Hm, frame, tuple(S_w.shape[-2:]))
    if mask.mean() < min_valid:
        raise LossError(f"valid overlap {mask.mean():.3f} below {min_valid:.0%} of the frame")
    back = geometry.warp_tensor(S_w.reshape(1, 1, *S_w.shape[-2:]), np.linalg.inv(Hm), frame)
    back = back.reshape(S.shape)
    return dice_loss(S, back, mask=torch.as_tensor(mask, dtype=S.dtype, device=S.device).expand_as(S))


def ssl_contrastive_loss(g_b, g_b_warp, g_r, g_r_warp, temperature: float = 0.07) -> torch.Tensor:
    """Keypoint InfoNCE: rows of g_b vs matching rows of g_b_warp, negatives from subject r.

    loss_i = -log( exp(cos(b_i, bw_i)/t) / (sum_u exp(cos(b_i, u)/t) + sum_v exp(cos(b_i, v)/t)) )
    with u over rows of g_r and v over rows of g_r_warp; returns the mean over i.
    """
    if not temperature > 0:
        raise LossError("temperature must be > 0")
    b, bw, r, rw = (_t(x) for x in (g_b, g_b_warp, g_r, g_r_warp))
    for name, x in zip(("g_b", "g_b_warp", "g_r", "g_r_warp"), (b, bw, r, rw)):
        if x.ndim != 2 or x.shape[0] == 0:
            raise LossError(f"{name} has no rows")
        if bool((x.norm(dim=1) == 0).any()):
            raise LossError(f"{name} has a zero-norm row")
    if b.shape[0] != bw.shape[0]:
        raise LossError("g_b and g_b_warp must have corresponding rows")
    b, bw, r, rw = (F.normalize(x, dim=1) for x in (b, bw, r, rw))
    pos = (b * bw).sum(dim=1) / temperature
    neg = torch.cat([b @ r.T, b @ rw.T], dim=1) / temperature
    return (torch.logsumexp(neg, dim=1) - pos).mean()


def total_loss(components: dict, weights: LossWeights = LossWeights()):
    """Weighted sum of the loss components present in ``components``."""
    w = weights.as_dict()
    total = 0.0
    for name, value in components.items():
        if name not in w:
            raise LossError(f"unknown loss term {name!r}")
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise LossError(f"non-finite loss term {name!r}: {v}")
        if w[name] == 0:
            continue
        total = total + w[name] * value
    return total
