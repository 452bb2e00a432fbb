"""Image/manifest ingestion, working-size resizing, color jitter and synthetic vessel phantoms."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import cv2
import numpy as np
from scipy import ndimage

from .types import InvariantError, KeypointSet, ScalarMap, read_annotation, validate

STYLES = ("dark-on-bright", "bright-on-dark")


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------------------
# image io


def read_image(path) -> np.ndarray:
    """Read an 8/16-bit lossless image as float32 in [0, 1] (RGB order for color)."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FileNotFoundError(f"cannot read image {path}")
    scale = 65535.0 if img.dtype == np.uint16 else 255.0 if img.dtype == np.uint8 else 1.0
    img = img.astype(np.float32) / scale
    if img.ndim == 3:
        img = img[..., :3][..., ::-1].copy()
    return img


def write_image(path, img: np.ndarray, bits: int = 8):
    a = np.clip(np.asarray(img, dtype=np.float64), 0, 1)
    a = (a * 65535 + 0.5).astype(np.uint16) if bits == 16 else (a * 255 + 0.5).astype(np.uint8)
    if a.ndim == 3:
        a = a[..., ::-1]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), a):
        raise OSError(f"cannot write image {path}")


def image_size(path) -> tuple:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FileNotFoundError(f"cannot read image {path}")
    return tuple(img.shape[:2])


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    image: Path
    annotation: Optional[Path]
    modality: str
    subject: str
    labels: Optional[KeypointSet] = None

    @property
    def image_id(self):
        return self.image.stem


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple
    split: str = "train"

    @property
    def labeled(self):
        return [e for e in self.entries if e.labels is not None]


def load_manifest(path) -> DatasetManifest:
    """Parse a manifest JSON: {"split": ..., "entries": [{"image", "annotation"?, "modality"?, "subject"?}]}.

    Paths are resolved relative to the manifest's directory; annotations are
    read at native image resolution and validated.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: malformed JSON ({exc})") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("entries"), list):
        raise ManifestError(f"{path}: expected an object with an 'entries' list")
    split = doc.get("split", "train")
    if split not in ("train", "val", "test"):
        raise ManifestError(f"{path}: unknown split {split!r}")
    root = path.parent
    entries = []
    for i, e in enumerate(doc["entries"]):
        if not isinstance(e, dict) or "image" not in e:
            raise ManifestError(f"{path}: entries[{i}] needs an 'image' field")
        img = (root / e["image"]).resolve()
        if not img.exists():
            raise ManifestError(f"{path}: entries[{i}] image {img} does not exist")
        ann = e.get("annotation")
        labels = None
        if ann:
            ann = (root / ann).resolve()
            if not ann.exists():
                raise ManifestError(f"{path}: entries[{i}] annotation {ann} does not exist")
            try:
                _, labels = read_annotation(ann, image_size(img))
            except (InvariantError, ValueError) as exc:
                raise ManifestError(f"{path}: entries[{i}] annotation invalid: {exc}") from exc
            if len(labels) == 0:
                raise ManifestError(f"{path}: entries[{i}] labeled entries need at least one point")
        entries.append(ManifestEntry(img, ann, e.get("modality", "unknown"),
                                     str(e.get("subject", img.stem)), labels))
    return DatasetManifest(tuple(entries), split)


# ---------------------------------------------------------------------------
# working-size resampling


@dataclass(frozen=True)
class ScaleRecord:
    original: tuple   # (H, W)
    working: tuple    # (H, W)

    @property
    def factors(self):
        """(sx, sy) multiplying original coords into the working frame."""
        return (self.working[1] / self.original[1], self.working[0] / self.original[0])

    def matrix(self) -> np.ndarray:
        sx, sy = self.factors
        return np.diag([sx, sy, 1.0])

    def to_working(self, coords):
        sx, sy = self.factors
        return np.asarray(coords, np.float64) * [sx, sy]

    def to_original(self, coords):
        sx, sy = self.factors
        return np.asarray(coords, np.float64) / [sx, sy]


def to_working(img, pts: Optional[KeypointSet] = None, working=(768, 768)):
    """Anisotropically resize to ``working`` (H, W); rescale keypoints with the same factors."""
    img = np.asarray(img)
    rec = ScaleRecord(tuple(img.shape[:2]), tuple(working))
    if rec.original == rec.working:
        out = img.copy()
    else:
        shrink = rec.working[0] < rec.original[0] and rec.working[1] < rec.original[1]
        out = cv2.resize(img.astype(np.float32), (rec.working[1], rec.working[0]),
                         interpolation=cv2.INTER_AREA if shrink else cv2.INTER_LINEAR)
    new_pts = None
    if pts is not None:
        c = rec.to_working(pts.coords)
        c[:, 0] = np.minimum(c[:, 0], np.nextafter(rec.working[1], 0))
        c[:, 1] = np.minimum(c[:, 1], np.nextafter(rec.working[0], 0))
        new_pts = KeypointSet(c, pts.scores, rec.working)
    return out, new_pts, rec


def color_jitter(img, strength: float = 0.3, seed: int = 0) -> np.ndarray:
    """Random brightness, contrast and gamma perturbation, clipped to [0, 1]."""
    if not 0 <= strength <= 1:
        raise ValueError("strength must lie in [0, 1]")
    img = np.asarray(img)
    if strength == 0:
        return img.copy()
    rng = np.random.default_rng(seed)
    brightness = rng.uniform(-0.2, 0.2) * strength
    contrast = 1.0 + rng.uniform(-0.5, 0.5) * strength
    gamma = math.exp(rng.uniform(-0.5, 0.5) * strength)
    x = img.astype(np.float64)
    m = x.mean()
    x = np.clip((x - m) * contrast + m + brightness, 0.0, 1.0) ** gamma
    return np.clip(x, 0.0, 1.0).astype(img.dtype if np.issubdtype(img.dtype, np.floating) else np.float32)


# ---------------------------------------------------------------------------
# synthetic vessel phantoms


@dataclass(frozen=True)
class PhantomConfig:
    frame: tuple = (256, 256)
    n_trees: int = 3
    branch_depth: int = 4
    width_px: tuple = (2.0, 4.5)
    noise_level: float = 0.03
    modality_style: str = "dark-on-bright"
    seed: int = 0

    def validate(self):
        if min(self.frame) < 64:
            return "frame must be at least 64 x 64"
        if self.branch_depth < 1:
            return "branch_depth must be >= 1"
        if self.n_trees < 1:
            return "n_trees must be >= 1"
        if self.modality_style not in STYLES:
            return f"modality_style must be one of {STYLES}"
        return None


def _bezier(p0, c, p1, n=48):
    t = np.linspace(0, 1, n)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * c + t ** 2 * p1


def _grow(rng, frame, start, heading, length, width, depth, segments, forks, margin):
    H, W = frame
    lo = np.array([margin, margin], dtype=np.float64)
    hi = np.array([W - 1 - margin, H - 1 - margin], dtype=np.float64)
    end = start + length * np.array([math.cos(heading), math.sin(heading)])
    if np.any(end < lo) or np.any(end > hi):
        # leaving the frame: bend back toward the center
        inward = math.atan2((H - 1) / 2 - start[1], (W - 1) / 2 - start[0])
        heading = inward + rng.uniform(-0.6, 0.6)
        end = start + length * np.array([math.cos(heading), math.sin(heading)])
    end = np.clip(end, lo, hi)
    mid = (start + end) / 2
    d = end - start
    normal = np.array([-d[1], d[0]]) / (np.linalg.norm(d) + 1e-12)
    ctrl = np.clip(mid + normal * rng.uniform(-0.2, 0.2) * np.linalg.norm(d), lo, hi)
    segments.append((_bezier(start, ctrl, end), width))
    if depth <= 1:
        return
    forks.append(end.copy())
    tangent = math.atan2(end[1] - ctrl[1], end[0] - ctrl[0])
    spread = rng.uniform(math.radians(25), math.radians(50), size=2)
    for sign, sp in zip((-1, 1), spread):
        _grow(rng, frame, end, tangent + sign * sp, length * rng.uniform(0.6, 0.8),
              max(width * 0.75, 1.0), depth - 1, segments, forks, margin)


def phantom_geometry(cfg: PhantomConfig):
    """Vessel polylines (with widths) and fork points for ``cfg``; style-independent."""
    rng = np.random.default_rng([cfg.seed, 0])
    H, W = cfg.frame
    segments, forks = [], []
    margin = 0.06 * min(H, W)
    for _ in range(cfg.n_trees):
        start = np.array([rng.uniform(0.15, 0.85) * (W - 1), rng.uniform(0.15, 0.85) * (H - 1)])
        to_center = math.atan2((H - 1) / 2 - start[1], (W - 1) / 2 - start[0])
        heading = to_center + rng.uniform(-0.9, 0.9) + (math.pi if rng.random() < 0.3 else 0.0)
        length = rng.uniform(0.28, 0.4) * min(H, W)
        width = rng.uniform(*cfg.width_px)
        _grow(rng, cfg.frame, start, heading, length, width, cfg.branch_depth, segments, forks, margin)
    return segments, np.array(forks, dtype=np.float64).reshape(-1, 2)


def _rasterize(segments, frame, scale=1.0):
    H, W = frame
    mask = np.zeros((H, W), dtype=np.uint8)
    shift = 4
    for pts, width in segments:
        p = np.round(pts * (1 << shift)).astype(np.int32).reshape(-1, 1, 2)
        cv2.polylines(mask, [p], False, 1, thickness=max(1, int(round(width * scale))),
                      lineType=cv2.LINE_8, shift=shift)
    return mask


def _smooth_field(rng, frame, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal(frame), sigma, mode="reflect")
    return f / (np.abs(f).max() + 1e-12)


def generate_phantom(cfg: PhantomConfig):
    """Render a branching-vessel phantom.

    Returns ``(image, vessel_mask, forks)``: a float32 image in [0, 1], the
    exact rasterized vessel mask as a segmentation ScalarMap, and the fork
    (bifurcation) points as a KeypointSet. Geometry depends only on the seed,
    so both styles of one seed share mask and keypoints.
    """
    bad = cfg.validate()
    if bad:
        raise ValueError(bad)
    segments, forks = phantom_geometry(cfg)
    mask = _rasterize(segments, cfg.frame).astype(np.float64)
    rng = np.random.default_rng([cfg.seed, 1 + STYLES.index(cfg.modality_style)])
    H, W = cfg.frame
    illum = _smooth_field(rng, cfg.frame, min(H, W) / 4)
    texture = _smooth_field(rng, cfg.frame, 2.0)
    if cfg.modality_style == "dark-on-bright":
        vessel = ndimage.gaussian_filter(mask, 0.8)
        img = 0.6 + 0.12 * illum + 0.05 * texture - 0.35 * vessel
        img = img + cfg.noise_level * rng.standard_normal(cfg.frame)
    else:
        vessel = ndimage.gaussian_filter(mask, 1.3)
        img = 0.15 + 0.06 * illum + 0.04 * texture + 0.6 * vessel
        img = img * (1 + 2 * cfg.noise_level * rng.standard_normal(cfg.frame))
        img = ndimage.gaussian_filter(img, 0.6)
    img = np.clip(img, 0, 1).astype(np.float32)
    if len(forks) > 1:
        _, first = np.unique(forks, axis=0, return_index=True)
        forks = forks[np.sort(first)]
    kps = KeypointSet.from_points(forks, cfg.frame)
    return img, ScalarMap(mask, "segmentation"), kps


@dataclass
class Sample:
    """One training/evaluation image at working size."""

    image_id: str
    image: np.ndarray
    labels: Optional[KeypointSet] = None
    subject: str = ""
    modality: str = ""
    partner: Optional[str] = None      # image id of the same subject in another modality
    scale: Optional[ScaleRecord] = None
    truth: Optional[KeypointSet] = None  # full ground-truth forks for phantoms

    @property
    def labeled(self):
        return self.labels is not None and len(self.labels) > 0


def phantom_dataset(n_subjects: int, frame=(256, 256), styles=STYLES, labeled_subjects: int = 0,
                    seed: int = 0, **phantom_kw) -> list:
    """Phantom samples, one per (subject, style); the first ``labeled_subjects`` subjects carry labels."""
    samples = []
    for s in range(n_subjects):
        ids = [f"ph{seed}_{s:03d}_{k}" for k in range(len(styles))]
        for k, style in enumerate(styles):
            img, _, kps = generate_phantom(PhantomConfig(frame=tuple(frame), modality_style=style,
                                                         seed=seed * 100003 + s, **phantom_kw))
            partner = ids[(k + 1) % len(ids)] if len(ids) > 1 else None
            samples.append(Sample(ids[k], img, kps if s < labeled_subjects else None,
                                  subject=f"ph{seed}_{s:03d}", modality=style, partner=partner,
                                  scale=ScaleRecord(tuple(frame), tuple(frame)), truth=kps))
    return samples


def load_samples(manifest: DatasetManifest, working=(768, 768)) -> list:
    """Read every manifest entry into a working-size :class:`Sample`."""
    from .network import to_gray
    samples = []
    by_subject: dict = {}
    for e in manifest.entries:
        img = to_gray(read_image(e.image))
        w_img, w_pts, rec = to_working(img, e.labels, working)
        samples.append(Sample(e.image_id, w_img.astype(np.float32), w_pts, e.subject, e.modality, None, rec))
        by_subject.setdefault(e.subject, []).append(len(samples) - 1)
    for idx in by_subject.values():
        for j, i in enumerate(idx):
            others = [k for k in idx if samples[k].modality != samples[i].modality]
            if others:
                samples[i].partner = samples[others[0]].image_id
    return samples


def save_phantom(out_dir, name: str, cfg: PhantomConfig):
    """Write the image / mask / keypoint-JSON triple for a phantom."""
    from .types import write_annotation
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    img, mask, kps = generate_phantom(cfg)
    write_image(out / f"{name}.png", img, bits=16)
    write_image(out / f"{name}_mask.png", mask.values)
    write_annotation(out / f"{name}.json", f"{name}.png", kps)
    return out / f"{name}.png"
