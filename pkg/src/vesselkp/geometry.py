"""Homography sampling, point/image warping, heatmaps, NMS and consistency filtering."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .types import Homography, KeypointSet, ScalarMap


class DegenerateHomographyError(RuntimeError):
    pass


@dataclass(frozen=True)
class HomographySamplerConfig:
    max_corner_shift: float = 0.1   # fraction of min(H, W)
    rotation_range: float = 15.0    # degrees, symmetric
    scale_range: tuple = (0.9, 1.1)
    translation_range: float = 0.05  # fraction of frame, symmetric
    seed: int = 0

    def validate(self):
        if min(self.max_corner_shift, self.rotation_range, self.translation_range) < 0:
            return "ranges must be nonnegative"
        lo, hi = self.scale_range
        if lo <= 0 or lo > hi:
            return "scale_range must satisfy 0 < lo <= hi"
        if not self.max_corner_shift < 0.5:
            return "max_corner_shift must be < 0.5"
        return None


def frame_corners(frame) -> np.ndarray:
    H, W = frame
    return np.array([[0, 0], [W - 1, 0], [W - 1, H - 1], [0, H - 1]], dtype=np.float64)


def homography_from_points(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Exact 4-point (or least-squares) homography via the normalized DLT."""
    src = np.asarray(src, np.float64)
    dst = np.asarray(dst, np.float64)
    Ts, ns = _hartley(src)
    Td, nd = _hartley(dst)
    n = len(src)
    A = np.zeros((2 * n, 9))
    x, y = ns[:, 0], ns[:, 1]
    u, v = nd[:, 0], nd[:, 1]
    A[0::2, 0] = x
    A[0::2, 1] = y
    A[0::2, 2] = 1
    A[0::2, 6] = -u * x
    A[0::2, 7] = -u * y
    A[0::2, 8] = -u
    A[1::2, 3] = x
    A[1::2, 4] = y
    A[1::2, 5] = 1
    A[1::2, 6] = -v * x
    A[1::2, 7] = -v * y
    A[1::2, 8] = -v
    _, _, vt = np.linalg.svd(A)
    Hn = vt[-1].reshape(3, 3)
    Hm = np.linalg.inv(Td) @ Hn @ Ts
    if abs(Hm[2, 2]) < 1e-15:
        raise DegenerateHomographyError("h33 vanished")
    return Hm / Hm[2, 2]


def _hartley(pts):
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2) / d if d > 0 else 1.0
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1]])
    return T, (pts - c) * s


def compose_homography(frame, rotation_deg=0.0, scale=1.0, tx=0.0, ty=0.0,
                       corner_offsets=None) -> np.ndarray:
    """Similarity about the frame center, translation in frame fractions, then corner jitter.

    ``tx``/``ty`` are fractions of W/H, so a pure translation gives third column
    (tx*W, ty*H, 1).
    """
    H, W = frame
    cx, cy = (W - 1) / 2.0, (H - 1) / 2.0
    a = math.radians(rotation_deg)
    ca, sa = math.cos(a) * scale, math.sin(a) * scale
    S = np.array([[ca, -sa, cx - ca * cx + sa * cy],
                  [sa, ca, cy - sa * cx - ca * cy],
                  [0, 0, 1]], dtype=np.float64)
    T = np.array([[1, 0, tx * W], [0, 1, ty * H], [0, 0, 1]], dtype=np.float64)
    M = T @ S
    if corner_offsets is not None and np.any(corner_offsets):
        src = frame_corners(frame)
        P = homography_from_points(src, src + np.asarray(corner_offsets, np.float64))
        M = M @ P
    return M / M[2, 2]


def _collinear(pts, tol=1e-6):
    scale = max(np.ptp(pts[:, 0]), np.ptp(pts[:, 1]), 1e-12)
    for i in range(4):
        a, b, c = np.delete(pts, i, axis=0)
        area = abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
        if area <= tol * scale * scale:
            return True
    return False


def sample_homography(cfg: HomographySamplerConfig, frame, rng=None) -> Homography:
    """Draw a random homography whose corners stay within ``max_corner_shift * min(H, W)``.

    Corner jitter of up to half the shift budget is composed with a random
    similarity; draws that break the corner bound or fold the frame are
    rejected. ``rng`` overrides ``cfg.seed`` when given.
    """
    bad = cfg.validate()
    if bad:
        raise ValueError(bad)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    H, W = frame
    budget = cfg.max_corner_shift * min(H, W)
    corners = frame_corners(frame)
    lo, hi = cfg.scale_range
    for _ in range(100):
        rot = rng.uniform(-cfg.rotation_range, cfg.rotation_range)
        sc = rng.uniform(lo, hi)
        tx, ty = rng.uniform(-cfg.translation_range, cfg.translation_range, size=2)
        jitter = rng.uniform(-0.5 * budget, 0.5 * budget, size=(4, 2))
        M = compose_homography(frame, rot, sc, tx, ty, jitter)
        moved, ok = transform_points(corners, M)
        if not ok.all() or _collinear(moved):
            continue
        if abs(np.linalg.det(M)) <= 1e-12:
            continue
        if np.max(np.linalg.norm(moved - corners, axis=1)) > budget + 1e-9:
            continue
        return Homography(M, "identity" if np.array_equal(M, np.eye(3)) else "sampled")
    raise DegenerateHomographyError("no admissible homography after 100 attempts")


def _as_matrix(H) -> np.ndarray:
    return H.matrix if isinstance(H, Homography) else np.asarray(H, dtype=np.float64)


def transform_points(pts, H):
    """Apply a homography to (N, 2) points or a KeypointSet.

    Returns ``(coords, valid)``; ``valid`` is False where the projective
    denominator is <= 1e-12 (those rows hold NaN). Frame membership is left
    to the caller, see :func:`in_frame`.
    """
    xy = pts.coords if isinstance(pts, KeypointSet) else np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    M = _as_matrix(H)
    w = M[2, 0] * xy[:, 0] + M[2, 1] * xy[:, 1] + M[2, 2]
    valid = w > 1e-12
    out = np.full_like(xy, np.nan)
    wv = w[valid]
    out[valid, 0] = (M[0, 0] * xy[valid, 0] + M[0, 1] * xy[valid, 1] + M[0, 2]) / wv
    out[valid, 1] = (M[1, 0] * xy[valid, 0] + M[1, 1] * xy[valid, 1] + M[1, 2]) / wv
    return out, valid


def in_frame(coords, frame) -> np.ndarray:
    H, W = frame
    c = np.asarray(coords)
    with np.errstate(invalid="ignore"):
        return (c[:, 0] >= 0) & (c[:, 0] < W) & (c[:, 1] >= 0) & (c[:, 1] < H)


def warp_keypoints(kps: KeypointSet, H, frame=None):
    """Warp a KeypointSet, keeping points that land inside ``frame``.

    Returns the warped set and the indices of the kept source points.
    """
    frame = kps.frame_size if frame is None else tuple(frame)
    coords, valid = transform_points(kps, H)
    keep = np.flatnonzero(valid & in_frame(coords, frame))
    out = coords[keep]
    # points landing on identical coordinates collapse to the first
    if len(out) > 1:
        _, first = np.unique(out, axis=0, return_index=True)
        first = np.sort(first)
        keep, out = keep[first], out[first]
    return KeypointSet(out, kps.scores[keep], frame), keep


def warp_image(img: np.ndarray, H, out_frame=None) -> np.ndarray:
    """Warp an image forward by ``H``: out(p) = img(H^-1 p), bilinear, zero fill."""
    img = np.asarray(img)
    out_frame = img.shape[:2] if out_frame is None else tuple(out_frame)
    Hi = np.linalg.inv(_as_matrix(H))
    oh, ow = out_frame
    ys, xs = np.mgrid[0:oh, 0:ow].astype(np.float64)
    src, valid = transform_points(np.stack([xs.ravel(), ys.ravel()], axis=1), Hi)
    src[~valid] = -10.0
    sx = src[:, 0].reshape(oh, ow)
    sy = src[:, 1].reshape(oh, ow)
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    ih, iw = img.shape[:2]

    def tap(yy, xx):
        ok = (xx >= 0) & (xx < iw) & (yy >= 0) & (yy < ih)
        vals = img[np.clip(yy, 0, ih - 1), np.clip(xx, 0, iw - 1)].astype(np.float64)
        if vals.ndim == 3:
            ok = ok[..., None]
        return np.where(ok, vals, 0.0)

    if img.ndim == 3:
        fx, fy = fx[..., None], fy[..., None]
    out = ((1 - fx) * (1 - fy) * tap(y0, x0) + fx * (1 - fy) * tap(y0, x0 + 1)
           + (1 - fx) * fy * tap(y0 + 1, x0) + fx * fy * tap(y0 + 1, x0 + 1))
    return out.astype(img.dtype if np.issubdtype(img.dtype, np.floating) else np.float64)


def warp_tensor(x: torch.Tensor, H, out_frame=None) -> torch.Tensor:
    """Differentiable counterpart of :func:`warp_image` for (B, C, H, W) tensors."""
    out_frame = tuple(x.shape[-2:]) if out_frame is None else tuple(out_frame)
    oh, ow = out_frame
    ih, iw = x.shape[-2:]
    Hi = torch.as_tensor(np.linalg.inv(_as_matrix(H)), dtype=x.dtype, device=x.device)
    ys, xs = torch.meshgrid(torch.arange(oh, dtype=x.dtype, device=x.device),
                            torch.arange(ow, dtype=x.dtype, device=x.device), indexing="ij")
    pts = torch.stack([xs, ys, torch.ones_like(xs)], dim=-1) @ Hi.T
    w = pts[..., 2]
    good = w > 1e-12
    w = torch.where(good, w, torch.ones_like(w))
    sx = torch.where(good, pts[..., 0] / w, torch.full_like(w, -10.0))
    sy = torch.where(good, pts[..., 1] / w, torch.full_like(w, -10.0))
    grid = torch.stack([2 * sx / max(iw - 1, 1) - 1, 2 * sy / max(ih - 1, 1) - 1], dim=-1)
    grid = grid.unsqueeze(0).expand(x.shape[0], -1, -1, -1)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=True)


def valid_region(H, frame, src_frame=None) -> np.ndarray:
    """Mask of pixels p in ``frame`` whose image H(p) falls inside ``src_frame``."""
    oh, ow = frame
    src_frame = frame if src_frame is None else src_frame
    ys, xs = np.mgrid[0:oh, 0:ow]
    c, ok = transform_points(np.stack([xs.ravel(), ys.ravel()], 1).astype(np.float64), H)
    sh, sw = src_frame
    with np.errstate(invalid="ignore"):
        inside = ok & (c[:, 0] >= 0) & (c[:, 0] <= sw - 1) & (c[:, 1] >= 0) & (c[:, 1] <= sh - 1)
    return inside.reshape(oh, ow)


# ---------------------------------------------------------------------------
# heatmaps and NMS


def gaussian_kernel(sigma: float, size: int) -> np.ndarray:
    r = size // 2
    ax = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def render_heatmap(pts: KeypointSet, sigma: float = 0.2, kernel: int = 13, frame=None,
                   normalize: bool = True) -> ScalarMap:
    """Blur a binary keypoint image with a k x k Gaussian and peak-normalize to 1."""
    if not sigma > 0 or kernel % 2 != 1 or kernel < 1:
        raise ValueError("sigma must be > 0 and kernel odd")
    frame = pts.frame_size if frame is None else tuple(frame)
    H, W = frame
    binary = np.zeros((H, W), dtype=np.float64)
    if len(pts):
        c = pts.coords
        if not in_frame(c, frame).all():
            raise ValueError("keypoint outside frame")
        xi = np.clip(np.rint(c[:, 0]).astype(np.int64), 0, W - 1)
        yi = np.clip(np.rint(c[:, 1]).astype(np.int64), 0, H - 1)
        binary[yi, xi] = 1.0
    out = ndimage.convolve(binary, gaussian_kernel(sigma, kernel), mode="constant", cval=0.0)
    if normalize and out.max() > 0:
        out = out / out.max()
    return ScalarMap(np.clip(out, 0.0, 1.0) if normalize else out, "heatmap")


def nms_extract(p, threshold: float = 0.5, radius: int = 10) -> KeypointSet:
    """Keypoints at pixels that outrank every other pixel within Chebyshev ``radius``.

    Rank is (value desc, y asc, x asc), so equal plateaus yield their
    top-left pixel. Kept pixels must also reach ``threshold``.
    """
    vals = p.values if isinstance(p, ScalarMap) else np.asarray(p, dtype=np.float64)
    vals = np.asarray(vals, dtype=np.float64)
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    if radius < 1:
        raise ValueError("radius must be >= 1")
    H, W = vals.shape
    r = int(radius)
    local_max = ndimage.maximum_filter(vals, size=2 * r + 1, mode="constant", cval=-np.inf)
    cand = np.argwhere((vals >= threshold) & (vals == local_max))
    if len(cand) == 0:
        return KeypointSet.empty((H, W))
    # Break plateau ties: drop a candidate if an equal value sits earlier in raster order.
    padded = np.pad(vals, r, mode="constant", constant_values=-np.inf)
    cy, cx = cand[:, 0], cand[:, 1]
    v = vals[cy, cx]
    keep = np.ones(len(cand), dtype=bool)
    for dy in range(-r, 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx >= 0:
                break
            keep &= padded[cy + r + dy, cx + r + dx] != v
    cand = cand[keep]
    order = np.lexsort((cand[:, 1], cand[:, 0], -vals[cand[:, 0], cand[:, 1]]))
    cand = cand[order]
    coords = np.stack([cand[:, 1], cand[:, 0]], axis=1).astype(np.float64)
    return KeypointSet(coords, vals[cand[:, 0], cand[:, 1]].clip(0, 1), (H, W))


def filter_consistent(Y: KeypointSet, Yp_back, tol: float = 0.5) -> KeypointSet:
    """Points of ``Y`` confirmed by a distinct back-mapped point within ``tol`` px.

    Assignment is greedy nearest-first; each back-mapped point confirms at
    most one point of ``Y``. Ties are resolved by coordinates, never by input
    order, so the result does not depend on how ``Yp_back`` is ordered.
    """
    if not tol > 0:
        raise ValueError("tol must be > 0")
    B = Yp_back.coords if isinstance(Yp_back, KeypointSet) else np.asarray(Yp_back, np.float64).reshape(-1, 2)
    B = B[np.all(np.isfinite(B), axis=1)]
    if len(Y) == 0 or len(B) == 0:
        return Y.subset(np.zeros(0, dtype=np.int64))
    d = np.sqrt(((Y.coords[:, None, :] - B[None, :, :]) ** 2).sum(-1))
    ii, jj = np.nonzero(d <= tol)
    if len(ii) == 0:
        return Y.subset(np.zeros(0, dtype=np.int64))
    order = np.lexsort((B[jj, 1], B[jj, 0], ii, d[ii, jj]))
    used_y, used_b = set(), set()
    for k in order:
        i, j = ii[k], jj[k]
        if i in used_y or j in used_b:
            continue
        used_y.add(i)
        used_b.add(j)
    return Y.subset(np.array(sorted(used_y), dtype=np.int64))
