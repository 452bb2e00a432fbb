"""Shared domain values: keypoints, scalar maps, descriptor maps, homographies.

Values are plain frozen dataclasses over numpy arrays. Construction never
checks invariants so malformed data can still be inspected; call
:func:`validate` to get the first violation, or :func:`ensure_valid` to raise.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

DESCRIPTOR_DIM = 256
EMBED_DIM = 256
SCALAR_ROLES = ("probability", "heatmap", "segmentation")
HOMOGRAPHY_PROVENANCE = ("sampled", "estimated", "identity")


class InvariantError(ValueError):
    """Raised when a value that must be valid is not."""

    def __init__(self, violation: "Violation"):
        super().__init__(str(violation))
        self.violation = violation


@dataclass(frozen=True)
class Violation:
    path: str
    message: str

    def __str__(self):
        return f"{self.path}: {self.message}"


def _frozen(a, dtype=np.float64) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class KeypointSet:
    """Sub-pixel keypoints as (x, y) = (column, row) with scores in [0, 1]."""

    coords: np.ndarray
    scores: np.ndarray
    frame_size: tuple  # (H, W)

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.size == 0:
            coords = coords.reshape(0, 2)
        object.__setattr__(self, "coords", _frozen(coords))
        object.__setattr__(self, "scores", _frozen(np.asarray(self.scores, dtype=np.float64).reshape(-1)))
        object.__setattr__(self, "frame_size", tuple(int(v) for v in self.frame_size))

    @classmethod
    def from_points(cls, points, frame_size, scores=None) -> "KeypointSet":
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        if scores is None:
            scores = np.ones(len(pts))
        return cls(pts, scores, frame_size)

    @classmethod
    def empty(cls, frame_size) -> "KeypointSet":
        return cls(np.zeros((0, 2)), np.zeros(0), frame_size)

    def __len__(self):
        return len(self.coords)

    def __eq__(self, other):
        if not isinstance(other, KeypointSet):
            return NotImplemented
        return (
            self.frame_size == other.frame_size
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.scores, other.scores)
        )

    def subset(self, index) -> "KeypointSet":
        return KeypointSet(self.coords[index], self.scores[index], self.frame_size)

    def union(self, other: "KeypointSet") -> "KeypointSet":
        return KeypointSet(
            np.concatenate([self.coords, other.coords]),
            np.concatenate([self.scores, other.scores]),
            self.frame_size,
        )

    def top_k(self, k: int) -> "KeypointSet":
        if len(self) <= k:
            return self
        order = np.argsort(-self.scores, kind="stable")[:k]
        return self.subset(np.sort(order))


@dataclass(frozen=True, eq=False)
class ScalarMap:
    values: np.ndarray
    role: str = "probability"

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))

    @property
    def frame_size(self):
        return tuple(self.values.shape[:2])

    def __eq__(self, other):
        return (isinstance(other, ScalarMap) and self.role == other.role
                and np.array_equal(self.values, other.values))


@dataclass(frozen=True, eq=False)
class DescriptorMap:
    values: np.ndarray  # H x W x D

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))

    @property
    def frame_size(self):
        return tuple(self.values.shape[:2])

    def __eq__(self, other):
        return isinstance(other, DescriptorMap) and np.array_equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class Homography:
    matrix: np.ndarray
    provenance: str = "sampled"

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape == (3, 3) and np.isfinite(m[2, 2]) and abs(m[2, 2]) > 1e-12 and m[2, 2] != 1.0:
            with np.errstate(invalid="ignore", over="ignore"):
                m = m / m[2, 2]
        object.__setattr__(self, "matrix", _frozen(m))

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3), "identity")

    @classmethod
    def translation(cls, tx: float, ty: float, provenance="sampled") -> "Homography":
        return cls(np.array([[1, 0, tx], [0, 1, ty], [0, 0, 1]], dtype=np.float64), provenance)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix), self.provenance)

    def __matmul__(self, other: "Homography") -> "Homography":
        return Homography(self.matrix @ other.matrix, self.provenance)

    def __eq__(self, other):
        return (isinstance(other, Homography) and self.provenance == other.provenance
                and np.array_equal(self.matrix, other.matrix))


@dataclass(frozen=True, eq=False)
class FeaturePyramid:
    """Encoder feature maps, level l stored channels-last as (H/2^l, W/2^l, C_l)."""

    levels: tuple

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(np.asarray(v) for v in self.levels))

    @property
    def shapes(self):
        return [lvl.shape for lvl in self.levels]


@dataclass(frozen=True, eq=False)
class KeypointEmbedding:
    per_point: np.ndarray  # N_k x 3E
    source_keypoints: KeypointSet
    embed_dim: int = EMBED_DIM

    def __post_init__(self):
        object.__setattr__(self, "per_point", _frozen(self.per_point))


# ---------------------------------------------------------------------------
# validation


def _check_keypoints(v: KeypointSet, path: str) -> Optional[Violation]:
    c, s = v.coords, v.scores
    if c.ndim != 2 or c.shape[1] != 2:
        return Violation(f"{path}.coords", f"expected N x 2 array, got shape {c.shape}")
    if len(s) != len(c):
        return Violation(f"{path}.scores", f"length {len(s)} != coords length {len(c)}")
    if len(v.frame_size) != 2 or min(v.frame_size) <= 0:
        return Violation(f"{path}.frame_size", f"invalid frame {v.frame_size}")
    H, W = v.frame_size
    if not np.all(np.isfinite(c)):
        return Violation(f"{path}.coords", "non-finite coordinate")
    for i, (x, y) in enumerate(c):
        if not 0 <= x < W:
            return Violation(f"{path}.coords[{i}]", f"x < W violated: 0 <= {x} < {W}")
        if not 0 <= y < H:
            return Violation(f"{path}.coords[{i}]", f"y < H violated: 0 <= {y} < {H}")
    if np.any(~np.isfinite(s)) or np.any((s < 0) | (s > 1)):
        return Violation(f"{path}.scores", "scores must lie in [0, 1]")
    if len(c) > 1 and len(np.unique(c, axis=0)) != len(c):
        return Violation(f"{path}.coords", "duplicate coordinates")
    return None


def _check_scalar_map(v: ScalarMap, path: str, frame=None) -> Optional[Violation]:
    a = v.values
    if v.role not in SCALAR_ROLES:
        return Violation(f"{path}.role", f"unknown role {v.role!r}")
    if a.ndim != 2:
        return Violation(f"{path}.values", f"expected H x W array, got shape {a.shape}")
    if frame is not None and tuple(a.shape) != tuple(frame):
        return Violation(f"{path}.values", f"shape {a.shape} != frame {tuple(frame)}")
    if not np.all(np.isfinite(a)) or a.size and (a.min() < 0 or a.max() > 1):
        return Violation(f"{path}.values", "values must lie in [0, 1]")
    return None


def _check_descriptor_map(v: DescriptorMap, path: str) -> Optional[Violation]:
    a = v.values
    if a.ndim != 3:
        return Violation(f"{path}.values", f"expected H x W x D array, got shape {a.shape}")
    if a.shape[2] != DESCRIPTOR_DIM:
        return Violation(f"{path}.values", f"descriptor dim {a.shape[2]} != {DESCRIPTOR_DIM}")
    norms = np.linalg.norm(a, axis=2)
    bad = ~(np.abs(norms - 1.0) <= 1e-5)
    if bad.any():
        y, x = np.argwhere(bad)[0]
        return Violation(f"{path}.values[{y},{x}]", f"unit norm violated (norm {norms[y, x]:.6g})")
    return None


def _check_homography(v: Homography, path: str) -> Optional[Violation]:
    m = v.matrix
    if m.shape != (3, 3):
        return Violation(f"{path}.matrix", f"expected 3 x 3, got {m.shape}")
    if not np.all(np.isfinite(m)):
        return Violation(f"{path}.matrix", "non-finite entry")
    if v.provenance not in HOMOGRAPHY_PROVENANCE:
        return Violation(f"{path}.provenance", f"unknown provenance {v.provenance!r}")
    if not abs(np.linalg.det(m)) > 1e-12:
        return Violation(f"{path}.matrix", "singular matrix (|det| <= 1e-12)")
    if m[2, 2] != 1.0:
        return Violation(f"{path}.matrix[2][2]", f"expected 1 after normalization, got {m[2, 2]}")
    return None


def _check_pyramid(v: FeaturePyramid, path: str) -> Optional[Violation]:
    if not v.levels:
        return Violation(f"{path}.levels", "empty pyramid")
    H0, W0 = v.levels[0].shape[:2]
    for i, lvl in enumerate(v.levels):
        if lvl.ndim != 3:
            return Violation(f"{path}.levels[{i}]", f"expected 3-d array, got shape {lvl.shape}")
        want = (-(-H0 // 2 ** i), -(-W0 // 2 ** i))
        if tuple(lvl.shape[:2]) != want:
            return Violation(f"{path}.levels[{i}]", f"spatial shape {lvl.shape[:2]} != {want}")
    return None


def _check_embedding(v: KeypointEmbedding, path: str) -> Optional[Violation]:
    a = v.per_point
    bad = _check_keypoints(v.source_keypoints, f"{path}.source_keypoints")
    if bad:
        return bad
    if a.ndim != 2 or a.shape[0] != len(v.source_keypoints):
        return Violation(f"{path}.per_point", f"row count {a.shape[0] if a.ndim else 0} != keypoint count {len(v.source_keypoints)}")
    if a.shape[1] != 3 * v.embed_dim:
        return Violation(f"{path}.per_point", f"column count {a.shape[1]} != 3*E = {3 * v.embed_dim}")
    return None


def validate(value: Any, path: str = "value") -> Optional[Violation]:
    """Return the first violated invariant of ``value`` or ``None`` when valid.

    Never raises for values of the known domain types, however malformed.
    """
    checks = {
        KeypointSet: _check_keypoints,
        ScalarMap: _check_scalar_map,
        DescriptorMap: _check_descriptor_map,
        Homography: _check_homography,
        FeaturePyramid: _check_pyramid,
        KeypointEmbedding: _check_embedding,
    }
    for cls, fn in checks.items():
        if isinstance(value, cls):
            try:
                return fn(value, path)
            except Exception as exc:  # malformed arrays (ragged, wrong dtype, ...)
                return Violation(path, f"malformed value: {exc}")
    if hasattr(value, "validate"):
        return value.validate()
    return Violation(path, f"unsupported type {type(value).__name__}")


def ensure_valid(value, path="value"):
    bad = validate(value, path)
    if bad is not None:
        raise InvariantError(bad)
    return value


# ---------------------------------------------------------------------------
# serialization


def serialize(value) -> dict:
    """Encode a domain value as a JSON-compatible dict (floats kept exact)."""
    if isinstance(value, KeypointSet):
        return {"type": "KeypointSet", "coords": value.coords.tolist(),
                "scores": value.scores.tolist(), "frame_size": list(value.frame_size)}
    if isinstance(value, ScalarMap):
        return {"type": "ScalarMap", "role": value.role, "values": value.values.tolist()}
    if isinstance(value, DescriptorMap):
        return {"type": "DescriptorMap", "shape": list(value.values.shape),
                "values": value.values.ravel().tolist()}
    if isinstance(value, Homography):
        return {"type": "Homography", "matrix": value.matrix.tolist(), "provenance": value.provenance}
    if isinstance(value, FeaturePyramid):
        return {"type": "FeaturePyramid",
                "levels": [{"shape": list(l.shape), "values": np.asarray(l, np.float64).ravel().tolist()}
                           for l in value.levels]}
    if isinstance(value, KeypointEmbedding):
        return {"type": "KeypointEmbedding", "embed_dim": value.embed_dim,
                "shape": list(value.per_point.shape),
                "per_point": value.per_point.ravel().tolist(),
                "source_keypoints": serialize(value.source_keypoints)}
    raise TypeError(f"cannot serialize {type(value).__name__}")


def deserialize(doc: dict):
    kind = doc.get("type")
    if kind == "KeypointSet":
        return KeypointSet(np.array(doc["coords"], dtype=np.float64).reshape(-1, 2),
                           np.array(doc["scores"], dtype=np.float64), tuple(doc["frame_size"]))
    if kind == "ScalarMap":
        return ScalarMap(np.array(doc["values"], dtype=np.float64), doc["role"])
    if kind == "DescriptorMap":
        return DescriptorMap(np.array(doc["values"], dtype=np.float64).reshape(doc["shape"]))
    if kind == "Homography":
        return Homography(np.array(doc["matrix"], dtype=np.float64), doc["provenance"])
    if kind == "FeaturePyramid":
        return FeaturePyramid(tuple(np.array(l["values"], dtype=np.float64).reshape(l["shape"])
                                    for l in doc["levels"]))
    if kind == "KeypointEmbedding":
        return KeypointEmbedding(np.array(doc["per_point"], dtype=np.float64).reshape(doc["shape"]),
                                 deserialize(doc["source_keypoints"]), doc["embed_dim"])
    raise ValueError(f"unknown serialized type {kind!r}")


# ---------------------------------------------------------------------------
# keypoint annotation files: {"image": name, "points": [[x, y], ...]}


def read_annotation(path, frame_size) -> tuple[str, KeypointSet]:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict) or "points" not in doc:
        raise ValueError(f"{path}: annotation must be an object with a 'points' list")
    pts = np.asarray(doc["points"], dtype=np.float64)
    if pts.size and (pts.ndim != 2 or pts.shape[1] != 2):
        raise ValueError(f"{path}: points must be [[x, y], ...]")
    kps = KeypointSet.from_points(pts.reshape(-1, 2), frame_size)
    bad = validate(kps, str(path))
    if bad is not None:
        raise InvariantError(bad)
    return doc.get("image", ""), kps


def write_annotation(path, image_name: str, kps: KeypointSet, with_scores=False):
    doc: dict = {"image": image_name, "points": kps.coords.tolist()}
    if with_scores:
        doc["scores"] = kps.scores.tolist()
    Path(path).write_text(json.dumps(doc))
