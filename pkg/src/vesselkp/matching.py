"""Descriptor matching, least-median-of-squares homography fitting, and pair registration."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from scipy.spatial.distance import cdist

from . import geometry
from .data import to_working
from .network import ModelState, to_gray
from .types import Homography, KeypointSet


class RegistrationError(RuntimeError):
    pass


@dataclass
class Matches:
    idx_a: np.ndarray
    idx_b: np.ndarray
    distance: np.ndarray
    ratio_test_skipped: bool = False

    def __len__(self):
        return len(self.idx_a)

    def __iter__(self):
        return iter(zip(self.idx_a.tolist(), self.idx_b.tolist(), self.distance.tolist()))


def nnbf_match(kpts_a, desc_a, kpts_b, desc_b, ratio: Optional[float] = 0.9, mutual: bool = True) -> Matches:
    """Brute-force nearest neighbours in L2 with optional ratio test and mutual check.

    ``ratio=None`` disables the ratio test. With fewer than two b-descriptors
    the ratio test cannot run; it is skipped and the result is flagged.
    """
    da = np.asarray(desc_a, np.float64)
    db = np.asarray(desc_b, np.float64)
    if len(da) == 0 or len(db) == 0:
        raise ValueError("need at least one keypoint on each side")
    d = cdist(da, db)
    nn = d.argmin(axis=1)
    best = d[np.arange(len(da)), nn]
    keep = np.ones(len(da), dtype=bool)
    skipped = False
    if ratio is not None:
        if len(db) < 2:
            skipped = True
        else:
            second = np.partition(d, 1, axis=1)[:, 1]
            with np.errstate(divide="ignore", invalid="ignore"):
                r = np.where(second > 0, best / second, np.inf)
            keep &= r < ratio
    if mutual:
        keep &= d.argmin(axis=0)[nn] == np.arange(len(da))
    ia = np.flatnonzero(keep)
    return Matches(ia, nn[ia], best[ia], skipped)


# ---------------------------------------------------------------------------
# least median of squares


def symmetric_transfer_error(M, src, dst) -> np.ndarray:
    """Squared forward plus backward transfer error per correspondence (inf if a point folds)."""
    fwd, ok_f = geometry.transform_points(src, M)
    bwd, ok_b = geometry.transform_points(dst, np.linalg.inv(M))
    err = ((fwd - dst) ** 2).sum(1) + ((bwd - src) ** 2).sum(1)
    err[~(ok_f & ok_b)] = np.inf
    return err


def _degenerate(pts, tol=1e-9):
    return geometry._collinear(pts, tol)


def lmeds_sample_count(outlier_rate=0.5, confidence=0.99, cap=2000):
    good = (1 - outlier_rate) ** 4
    if good >= 1:
        return 1
    return int(min(cap, math.ceil(math.log(1 - confidence) / math.log(1 - good))))


@dataclass
class HomographyFit:
    homography: Homography
    inliers: np.ndarray
    median_error: float
    sigma: float


def estimate_homography(src, dst, seed: int = 0, outlier_rate: float = 0.5,
                        max_samples: int = 2000) -> HomographyFit:
    """Least-median-of-squares homography mapping ``src`` -> ``dst``.

    Minimal 4-point fits are scored by the median symmetric transfer error;
    the best one sets a robust scale, and the final matrix is refit on the
    inliers (residual < 2.5 sigma). Correspondences are sorted before
    sampling so the result does not depend on their order.
    """
    src = np.asarray(src, np.float64).reshape(-1, 2)
    dst = np.asarray(dst, np.float64).reshape(-1, 2)
    n = len(src)
    if n != len(dst):
        raise ValueError("src and dst lengths differ")
    if n < 4:
        raise RegistrationError("insufficient correspondences (need >= 4)")
    order = np.lexsort((dst[:, 1], dst[:, 0], src[:, 1], src[:, 0]))
    s, d = src[order], dst[order]
    n_samples = lmeds_sample_count(outlier_rate, cap=max_samples)
    if math.comb(n, 4) <= n_samples:
        samples = itertools.combinations(range(n), 4)
    else:
        rng = np.random.default_rng(seed)
        samples = (rng.choice(n, 4, replace=False) for _ in range(n_samples))
    best_med, best_M = np.inf, None
    for idx in samples:
        idx = np.asarray(idx)
        if _degenerate(s[idx]) or _degenerate(d[idx]):
            continue
        try:
            M = geometry.homography_from_points(s[idx], d[idx])
        except (geometry.DegenerateHomographyError, np.linalg.LinAlgError):
            continue
        if not np.all(np.isfinite(M)) or abs(np.linalg.det(M)) < 1e-12:
            continue
        med = np.median(symmetric_transfer_error(M, s, d))
        if med < best_med:
            best_med, best_M = med, M
    if best_M is None:
        raise RegistrationError("all minimal samples were degenerate")
    sigma = 1.4826 * (1 + 5 / max(n - 4, 1)) * math.sqrt(best_med)
    spread = np.sqrt(((s - s.mean(0)) ** 2).sum(1)).mean()
    thresh = max(2.5 * sigma, 1e-6 * max(spread, 1e-12))
    inl = np.sqrt(symmetric_transfer_error(best_M, s, d)) <= thresh
    M = best_M
    if inl.sum() >= 4:
        try:
            refit = geometry.homography_from_points(s[inl], d[inl])
            if np.all(np.isfinite(refit)) and abs(np.linalg.det(refit)) > 1e-12:
                M = refit
        except geometry.DegenerateHomographyError:
            pass
    mask = np.zeros(n, dtype=bool)
    mask[order] = inl
    return HomographyFit(Homography(M, "estimated"), mask, float(best_med), float(sigma))


# ---------------------------------------------------------------------------
# registration


@dataclass(frozen=True)
class RegisterConfig:
    working_size: tuple = (768, 768)
    nms_threshold: float = 0.5
    nms_radius: int = 10
    ratio: Optional[float] = 0.9
    mutual: bool = True
    max_keypoints: int = 1024
    passes: int = 2
    seed: int = 0


@dataclass
class Registration:
    M: Homography                  # moving -> fixed, original resolutions
    matches: Matches
    kpts_m: KeypointSet            # working frame
    kpts_f: KeypointSet
    diagnostics: dict = field(default_factory=dict)


def detect_and_describe(state: ModelState, img_working, cfg: RegisterConfig):
    """Keypoints (working frame) and their unit descriptors for one working-size image."""
    from .trainer import predict
    P, levels = predict(state, [img_working], cfg.passes, cfg.nms_threshold, cfg.nms_radius)
    kps = geometry.nms_extract(P[0], cfg.nms_threshold, cfg.nms_radius).top_k(cfg.max_keypoints)
    if len(kps) == 0:
        return kps, np.zeros((0, state.net.cfg.descriptor_dim)), P[0]
    with torch.no_grad():
        desc = state.net.describe_points(levels, kps.coords, 0).double().numpy()
    return kps, desc, P[0]


def register_pair(img_m, img_f, state: ModelState, cfg: RegisterConfig = RegisterConfig(),
                  imported: Optional[list] = None) -> Registration:
    """Detect, describe, match and fit M so that M maps moving-image pixels onto the fixed image.

    ``imported`` replaces descriptor matching with external (index_m, index_f, score)
    triples indexed into this detector's keypoints.
    """
    wm, _, rec_m = to_working(to_gray(img_m), None, cfg.working_size)
    wf, _, rec_f = to_working(to_gray(img_f), None, cfg.working_size)
    km, dm, _ = detect_and_describe(state, wm, cfg)
    kf, df, _ = detect_and_describe(state, wf, cfg)
    if len(km) == 0 or len(kf) == 0:
        raise RegistrationError("no keypoints detected")
    if imported is not None:
        arr = np.asarray(imported, dtype=np.float64).reshape(-1, 3)
        ia, ib = arr[:, 0].astype(int), arr[:, 1].astype(int)
        if len(arr) and (ia.max() >= len(km) or ib.max() >= len(kf) or min(ia.min(), ib.min()) < 0):
            raise RegistrationError("imported match indices out of range")
        matches = Matches(ia, ib, arr[:, 2])
    else:
        matches = nnbf_match(km.coords, dm, kf.coords, df, cfg.ratio, cfg.mutual)
    if len(matches) < 4:
        raise RegistrationError(f"insufficient correspondences ({len(matches)} matches)")
    fit = estimate_homography(km.coords[matches.idx_a], kf.coords[matches.idx_b], seed=cfg.seed)
    M = np.linalg.inv(rec_f.matrix()) @ fit.homography.matrix @ rec_m.matrix()
    diag = {"keypoints_m": len(km), "keypoints_f": len(kf), "matches": len(matches),
            "inliers": int(fit.inliers.sum()), "median_error": fit.median_error,
            "ratio_test_skipped": matches.ratio_test_skipped}
    return Registration(Homography(M, "estimated"), matches, km, kf, diag)


# ---------------------------------------------------------------------------
# file formats


def write_homography(path, M: Homography, pair_id: str = ""):
    doc = {"pair": pair_id, "matrix": M.matrix.tolist(), "provenance": M.provenance}
    Path(path).write_text(json.dumps(doc, indent=1))


def read_homography(path) -> Homography:
    doc = json.loads(Path(path).read_text())
    m = np.asarray(doc["matrix"], dtype=np.float64)
    if m.size != 9:
        raise ValueError(f"{path}: matrix must have 9 entries")
    return Homography(m.reshape(3, 3), doc.get("provenance", "estimated"))


def write_matches(path, pair_id: str, matches: Matches):
    doc = {"pair": pair_id, "matches": [[int(a), int(b), float(s)] for a, b, s in matches]}
    Path(path).write_text(json.dumps(doc))


def read_matches(path) -> dict:
    """Match-file hook: one {"pair", "matches"} object or a list of them; returns pair id -> triples."""
    doc = json.loads(Path(path).read_text())
    docs = doc if isinstance(doc, list) else [doc]
    out = {}
    for d in docs:
        rows = d.get("matches", [])
        if any(len(r) != 3 for r in rows):
            raise ValueError(f"{path}: matches must be [index_a, index_b, score] triples")
        out[str(d.get("pair", ""))] = rows
    return out
