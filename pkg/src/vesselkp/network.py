"""Shared-trunk keypoint network with keypoint-attention fusion, plus the prompt-driven segmentation U-Net."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .types import (DescriptorMap, FeaturePyramid, KeypointEmbedding, KeypointSet,
                    ScalarMap)

CHECKPOINT_FORMAT = "vesselkp-checkpoint/1"


@dataclass(frozen=True)
class NetworkConfig:
    channels: tuple = (64, 128, 128, 256)
    embed_dim: int = 256
    descriptor_dim: int = 256
    attention_heads: int = 4
    working_size: tuple = (768, 768)
    seg_channels: tuple = (32, 64, 128)
    fusion: bool = True
    detector_prior: float = 0.05

    def validate(self):
        if len(self.channels) != 4 or min(self.channels) <= 0:
            return "channels must hold four positive widths"
        if self.embed_dim <= 0 or self.embed_dim % self.attention_heads:
            return "embed_dim must be positive and divisible by attention_heads"
        if self.descriptor_dim != 256:
            return "descriptor_dim must be 256"
        if any(s % 8 for s in self.working_size):
            return "working_size must be divisible by 8"
        if len(self.seg_channels) != 3:
            return "seg_channels must hold three widths"
        return None

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("channels", "working_size", "seg_channels"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def to_gray(img: np.ndarray) -> np.ndarray:
    """Single-channel float image; RGB inputs keep their green channel."""
    img = np.asarray(img)
    if img.ndim == 3:
        img = img[..., 1] if img.shape[2] >= 3 else img[..., 0]
    return img


class DoubleConv(nn.Sequential):
    # group norm keeps training stable at batch size 2 and is independent of batch composition
    def __init__(self, cin, cout):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1), nn.GroupNorm(math.gcd(cout, 8), cout), nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1), nn.GroupNorm(math.gcd(cout, 8), cout), nn.ReLU(inplace=True),
        )


class KeypointFusion(nn.Module):
    """Attend over features sampled at candidate keypoints and fold them back into the map."""

    def __init__(self, channels, embed_dim, heads):
        super().__init__()
        self.project = nn.Sequential(nn.Linear(channels, embed_dim), nn.ReLU(),
                                     nn.Linear(embed_dim, embed_dim))
        self.attention = nn.TransformerEncoderLayer(
            embed_dim, heads, dim_feedforward=2 * embed_dim, dropout=0.0, batch_first=True)
        self.fuse = nn.Conv2d(channels + embed_dim, channels, 1)
        with torch.no_grad():
            self.fuse.weight.zero_()
            self.fuse.weight[:, :channels, 0, 0] = torch.eye(channels)
            self.fuse.bias.zero_()
        self.embed_dim = embed_dim

    def forward(self, feat: torch.Tensor, xy: Optional[torch.Tensor], stride: int):
        """``feat`` is (C, h, w) for one image; ``xy`` holds (N, 2) working-frame coords."""
        C, h, w = feat.shape
        scatter = feat.new_zeros(self.embed_dim, h * w)
        if xy is None or len(xy) == 0:
            tokens = feat.new_zeros(0, self.embed_dim)
        else:
            ix = torch.div(xy[:, 0], stride, rounding_mode="floor").long().clamp(0, w - 1)
            iy = torch.div(xy[:, 1], stride, rounding_mode="floor").long().clamp(0, h - 1)
            tokens = self.attention(self.project(feat[:, iy, ix].T)[None])[0]
            flat = iy * w + ix
            scatter = scatter.index_add(1, flat, tokens.T)
            counts = torch.bincount(flat, minlength=h * w).to(feat.dtype).clamp_min(1)
            scatter = scatter / counts
        fused = self.fuse(torch.cat([feat, scatter.view(-1, h, w)], 0)[None])[0]
        return fused, tokens


def _bilinear_kernel(factor):
    size = 2 * factor
    center = factor - 0.5
    og = np.arange(size)
    f = 1 - np.abs(og - center) / factor
    return torch.tensor(np.outer(f, f), dtype=torch.float32)


class KeypointNet(nn.Module):
    """Encoder (four levels) with fusion at levels 0-2, detector U-Net decoder and descriptor head."""

    def __init__(self, cfg: NetworkConfig = NetworkConfig(), in_channels: int = 1):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        E = cfg.embed_dim
        self.encoder = nn.ModuleList(
            [DoubleConv(in_channels, c[0])] + [DoubleConv(c[i - 1], c[i]) for i in range(1, 4)])
        self.fusion = nn.ModuleList([KeypointFusion(c[i], E, cfg.attention_heads) for i in range(3)])
        self.embed_head = nn.Linear(3 * E, 3 * E)
        self.decoder = nn.ModuleList([DoubleConv(c[i + 1] + c[i], c[i]) for i in range(3)])
        self.det_out = nn.Conv2d(c[0], 1, 1)
        with torch.no_grad():
            p = cfg.detector_prior
            self.det_out.bias.fill_(math.log(p / (1 - p)))
        self.desc_conv = nn.Sequential(nn.Conv2d(c[3], c[3], 3, padding=1), nn.ReLU(inplace=True),
                                       nn.Conv2d(c[3], cfg.descriptor_dim, 1))
        # one learned 8x upsampling kernel shared by every descriptor channel
        self.desc_up = nn.Parameter(_bilinear_kernel(8)[None, None].clone())

    # -- encoder -----------------------------------------------------------------
    def encode(self, x: torch.Tensor, candidates: Optional[Sequence] = None):
        """Return (levels, embeddings): four (B, C_l, H/2^l, W/2^l) maps and per-image (N_b, 3E) rows."""
        B = x.shape[0]
        if candidates is None:
            candidates = [None] * B
        cands = [None if c is None else torch.tensor(np.asarray(c), dtype=x.dtype, device=x.device).reshape(-1, 2)
                 for c in candidates]
        tokens = [[] for _ in range(B)]
        levels = []
        f = x
        for l, block in enumerate(self.encoder):
            if l:
                f = F.max_pool2d(f, 2, ceil_mode=True)
            f = block(f)
            if l < 3 and self.cfg.fusion:
                outs = []
                for b in range(B):
                    fused, tok = self.fusion[l](f[b], cands[b], 2 ** l)
                    outs.append(fused)
                    tokens[b].append(tok)
                f = torch.stack(outs)
            levels.append(f)
        E = self.cfg.embed_dim
        embeddings = []
        for b in range(B):
            if not self.cfg.fusion or cands[b] is None or len(cands[b]) == 0:
                embeddings.append(x.new_zeros(0, 3 * E))
            else:
                embeddings.append(self.embed_head(torch.cat(tokens[b], 1)))
        return levels, embeddings

    def detect(self, levels) -> torch.Tensor:
        y = levels[3]
        for l in (2, 1, 0):
            skip = levels[l]
            y = F.interpolate(y, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            y = self.decoder[l](torch.cat([y, skip], 1))
        return torch.sigmoid(self.det_out(y))

    def describe(self, levels, raw: bool = False) -> torch.Tensor:
        d = self.desc_conv(levels[3])
        B, D, h, w = d.shape
        up = F.conv_transpose2d(d.reshape(B * D, 1, h, w), self.desc_up, stride=8, padding=4)
        up = up.reshape(B, D, 8 * h, 8 * w)
        H, W = levels[0].shape[-2:]
        up = up[..., :H, :W]
        if raw:
            return up
        return l2_normalize(up)

    def describe_points(self, levels, xy: torch.Tensor, b: int = 0) -> torch.Tensor:
        """Descriptors of image ``b`` at sub-pixel (N, 2) coords without the full map.

        Equals bilinear sampling (border clamped) of :meth:`describe` followed by
        renormalization, but evaluates the transposed convolution only at the
        four pixels around each point.
        """
        d = self.desc_conv(levels[3][b:b + 1])[0]  # D, h, w
        D, h, w = d.shape
        H, W = levels[0].shape[-2:]
        if not isinstance(xy, torch.Tensor):
            xy = torch.tensor(np.asarray(xy))
        xy = xy.to(dtype=d.dtype, device=d.device).reshape(-1, 2)
        x = xy[:, 0].clamp(0, W - 1)
        y = xy[:, 1].clamp(0, H - 1)
        x0 = x.floor().clamp(max=W - 1)
        y0 = y.floor().clamp(max=H - 1)
        fx, fy = x - x0, y - y0
        x0, y0 = x0.long(), y0.long()
        x1 = (x0 + 1).clamp(max=W - 1)
        y1 = (y0 + 1).clamp(max=H - 1)
        k = self.desc_up[0, 0]

        def pixel(py, px):
            # out[py, px] = sum_{i,j} d[:, i, j] * k[py + 4 - 8i, px + 4 - 8j]
            acc = 0
            for di in (0, 1):
                i = torch.div(py + 4, 8, rounding_mode="floor") - di
                ky = py + 4 - 8 * i
                for dj in (0, 1):
                    j = torch.div(px + 4, 8, rounding_mode="floor") - dj
                    kx = px + 4 - 8 * j
                    ok = (i >= 0) & (i < h) & (j >= 0) & (j < w)
                    vals = d[:, i.clamp(0, h - 1), j.clamp(0, w - 1)]
                    acc = acc + vals * (k[ky, kx] * ok.to(d.dtype))
            return l2_normalize(acc.T[..., None, None])[..., 0, 0]

        out = ((1 - fx)[:, None] * (1 - fy)[:, None] * pixel(y0, x0)
               + fx[:, None] * (1 - fy)[:, None] * pixel(y0, x1)
               + (1 - fx)[:, None] * fy[:, None] * pixel(y1, x0)
               + fx[:, None] * fy[:, None] * pixel(y1, x1))
        return F.normalize(out, dim=1, eps=1e-12)

    def forward(self, x, candidates=None):
        levels, emb = self.encode(x, candidates)
        return self.detect(levels), self.describe(levels), emb


def l2_normalize(d: torch.Tensor) -> torch.Tensor:
    """Normalize along channels; all-zero vectors become e_1."""
    norm = d.norm(dim=1, keepdim=True)
    out = d / norm.clamp_min(1e-30)
    zero = norm == 0
    if bool(zero.any()):
        e1 = torch.zeros_like(out)
        e1[:, 0] = 1
        out = torch.where(zero, e1, out)
    return out


class SegmentationUNet(nn.Module):
    """Three-level U-Net over (image, keypoint heatmap) channels."""

    def __init__(self, channels=(32, 64, 128), in_channels: int = 2):
        super().__init__()
        c0, c1, c2 = channels
        self.enc0 = DoubleConv(in_channels, c0)
        self.enc1 = DoubleConv(c0, c1)
        self.enc2 = DoubleConv(c1, c2)
        self.dec1 = DoubleConv(c2 + c1, c1)
        self.dec0 = DoubleConv(c1 + c0, c0)
        self.out = nn.Conv2d(c0, 1, 1)

    def forward(self, img, heatmap):
        x = torch.cat([img, heatmap], 1)
        e0 = self.enc0(x)
        e1 = self.enc1(F.max_pool2d(e0, 2, ceil_mode=True))
        e2 = self.enc2(F.max_pool2d(e1, 2, ceil_mode=True))
        d1 = self.dec1(torch.cat([F.interpolate(e2, size=e1.shape[-2:], mode="bilinear", align_corners=False), e1], 1))
        d0 = self.dec0(torch.cat([F.interpolate(d1, size=e0.shape[-2:], mode="bilinear", align_corners=False), e0], 1))
        return torch.sigmoid(self.out(d0))


# ---------------------------------------------------------------------------
# numpy-facing wrappers around a single image


def _img_tensor(img, dtype=torch.float32, device="cpu"):
    g = to_gray(img).astype(np.float64)
    return torch.as_tensor(g, dtype=dtype, device=device)[None, None]


def _dtype(module):
    return next(module.parameters()).dtype


@torch.no_grad()
def encode(net: KeypointNet, img, candidates: Optional[KeypointSet] = None):
    """Encode one image; returns (FeaturePyramid, KeypointEmbedding) as numpy values."""
    x = _img_tensor(img, _dtype(net))
    frame = x.shape[-2:]
    cand = None if candidates is None or len(candidates) == 0 else candidates.coords
    levels, emb = net.encode(x, [cand])
    pyr = FeaturePyramid(tuple(l[0].permute(1, 2, 0).double().numpy() for l in levels))
    src = candidates if candidates is not None else KeypointSet.empty(tuple(frame))
    return pyr, KeypointEmbedding(emb[0].double().numpy(), src, net.cfg.embed_dim)


def _levels_from(net, pyr: FeaturePyramid):
    dt = _dtype(net)
    return [torch.tensor(np.asarray(l), dtype=dt).permute(2, 0, 1)[None] for l in pyr.levels]


@torch.no_grad()
def detect(net: KeypointNet, pyr: FeaturePyramid) -> ScalarMap:
    return ScalarMap(net.detect(_levels_from(net, pyr))[0, 0].double().numpy(), "probability")


@torch.no_grad()
def describe(net: KeypointNet, pyr: FeaturePyramid) -> DescriptorMap:
    return DescriptorMap(net.describe(_levels_from(net, pyr))[0].permute(1, 2, 0).double().numpy())


@torch.no_grad()
def segment(seg: SegmentationUNet, img, kp_heatmap) -> ScalarMap:
    dt = _dtype(seg)
    hm = kp_heatmap.values if isinstance(kp_heatmap, ScalarMap) else np.asarray(kp_heatmap)
    x = _img_tensor(img, dt)
    if tuple(hm.shape) != tuple(x.shape[-2:]):
        raise ValueError("image and heatmap frames differ")
    h = torch.tensor(np.asarray(hm), dtype=dt)[None, None]
    return ScalarMap(seg(x, h)[0, 0].double().numpy(), "segmentation")


# ---------------------------------------------------------------------------
# model state and checkpoints


@dataclass
class ModelState:
    """Everything the trainer mutates: parameters, step counter, label and candidate caches."""

    net: KeypointNet
    seg_net: SegmentationUNet
    iteration: int = 0
    expanded_labels: dict = field(default_factory=dict)   # image id -> KeypointSet
    original_labels: dict = field(default_factory=dict)   # image id -> KeypointSet
    candidates: dict = field(default_factory=dict)        # image id -> KeypointSet
    epoch: int = 0
    optimizer: Optional[torch.optim.Optimizer] = None
    extra: dict = field(default_factory=dict)

    @property
    def config(self) -> NetworkConfig:
        return self.net.cfg

    def validate(self):
        from .types import Violation
        if self.iteration < 0:
            return Violation("ModelState.iteration", "must be nonnegative")
        for key, orig in self.original_labels.items():
            exp = self.expanded_labels.get(key)
            if exp is None:
                return Violation(f"ModelState.expanded_labels[{key}]", "missing for labeled image")
            have = {tuple(p) for p in exp.coords.tolist()}
            if any(tuple(p) not in have for p in orig.coords.tolist()):
                return Violation(f"ModelState.expanded_labels[{key}]", "not a superset of the annotation")
        return None

    def eval(self):
        self.net.eval()
        self.seg_net.eval()
        return self

    def train(self):
        self.net.train()
        self.seg_net.train()
        return self


def build_state(cfg: NetworkConfig, seed: int = 0, dtype=torch.float32) -> ModelState:
    bad = cfg.validate()
    if bad:
        raise ValueError(bad)
    torch.manual_seed(seed)
    net = KeypointNet(cfg).to(dtype)
    seg = SegmentationUNet(cfg.seg_channels).to(dtype)
    return ModelState(net, seg)


def _kps_doc(d: dict):
    return {k: {"coords": v.coords.tolist(), "scores": v.scores.tolist(), "frame": list(v.frame_size)}
            for k, v in d.items()}


def _kps_load(d: dict):
    return {k: KeypointSet(np.array(v["coords"], dtype=np.float64).reshape(-1, 2),
                           np.array(v["scores"], dtype=np.float64), tuple(v["frame"]))
            for k, v in d.items()}


def save_checkpoint(path, state: ModelState, extra: Optional[dict] = None):
    doc = {
        "format": CHECKPOINT_FORMAT,
        "network_config": state.net.cfg.to_dict(),
        "net": state.net.state_dict(),
        "seg_net": state.seg_net.state_dict(),
        "iteration": state.iteration,
        "epoch": state.epoch,
        "expanded_labels": _kps_doc(state.expanded_labels),
        "original_labels": _kps_doc(state.original_labels),
        "candidates": _kps_doc(state.candidates),
        "extra": {**state.extra, **(extra or {})},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(doc, path)


def load_checkpoint(path) -> ModelState:
    doc = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} archive")
    cfg = NetworkConfig.from_dict(doc["network_config"])
    state = build_state(cfg)
    dtype = next(iter(doc["net"].values())).dtype
    state.net.to(dtype)
    state.seg_net.to(dtype)
    state.net.load_state_dict(doc["net"])
    state.seg_net.load_state_dict(doc["seg_net"])
    state.iteration = doc["iteration"]
    state.epoch = doc.get("epoch", 0)
    state.expanded_labels = _kps_load(doc["expanded_labels"])
    state.original_labels = _kps_load(doc["original_labels"])
    state.candidates = _kps_load(doc["candidates"])
    state.extra = doc.get("extra", {})
    return state.eval()
