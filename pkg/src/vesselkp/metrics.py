"""Alignment accuracy: per-pair transfer errors, mMAE / mMEE / AUC aggregates and report files."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import geometry
from .types import Homography, KeypointSet

DEFAULT_THRESHOLD = 25

# Published full-scale results (mMAE, mMEE, AUC) kept for reference only;
# they need clinical data and full training and are not targets of this package.
REFERENCE_RESULTS = {
    ("ours+lightglue", "FIRE"): (13.9, 4.42, 0.778),
}

EVALUATED = "evaluated"
FAILED = "registration_failed"


@dataclass
class PairEvaluation:
    pair_id: str
    errors: np.ndarray = field(default_factory=lambda: np.zeros(0))
    status: str = EVALUATED

    def __post_init__(self):
        self.errors = np.asarray(self.errors, dtype=np.float64).reshape(-1)
        if self.status not in (EVALUATED, FAILED):
            raise ValueError(f"unknown status {self.status!r}")
        if self.status == FAILED and len(self.errors):
            raise ValueError("a failed registration carries no errors")
        if self.status == EVALUATED and len(self.errors) == 0:
            raise ValueError("an evaluated pair needs at least one error")
        if np.any(~(self.errors >= 0)):
            raise ValueError("errors must be nonnegative")

    @classmethod
    def failed(cls, pair_id):
        return cls(pair_id, np.zeros(0), FAILED)

    @property
    def ok(self):
        return self.status == EVALUATED

    def statistic(self, kind="max"):
        if not self.ok:
            return np.inf
        return float(self.errors.max() if kind == "max" else np.median(self.errors) if kind == "median"
                     else self.errors.mean())


def _coords(k):
    return k.coords if isinstance(k, KeypointSet) else np.asarray(k, np.float64).reshape(-1, 2)


def pair_errors(M, K_m, K_f) -> np.ndarray:
    """L2 distance between M applied to each moving keypoint and its fixed counterpart."""
    a, b = _coords(K_m), _coords(K_f)
    if len(a) != len(b):
        raise ValueError(f"keypoint count mismatch: {len(a)} vs {len(b)}")
    mapped, ok = geometry.transform_points(a, M)
    err = np.sqrt(((mapped - b) ** 2).sum(1))
    err[~ok] = np.inf
    return err


def corner_errors(M, H_true, frame) -> np.ndarray:
    """Distance between where M and the true homography send each image corner."""
    c = geometry.frame_corners(frame)
    return pair_errors(M, c, geometry.transform_points(c, H_true)[0])


@dataclass
class Aggregate:
    mMAE: float
    mMEE: float
    AUC: float
    n_pairs: int
    n_failed: int
    curve: np.ndarray      # success fraction at thresholds 1..T

    def to_dict(self):
        return {"mMAE": self.mMAE, "mMEE": self.mMEE, "AUC": self.AUC, "pairs": self.n_pairs,
                "failed": self.n_failed, "curve": self.curve.tolist()}


def success_curve(evaluations: Sequence[PairEvaluation], threshold: int = DEFAULT_THRESHOLD,
                  statistic: str = "max") -> np.ndarray:
    stats = np.array([e.statistic(statistic) for e in evaluations])
    grid = np.arange(1, threshold + 1)
    return (stats[None, :] <= grid[:, None]).mean(axis=1)


def aggregate(evaluations: Sequence[PairEvaluation], threshold: int = DEFAULT_THRESHOLD,
              statistic: str = "max") -> Aggregate:
    """mMAE / mMEE over evaluated pairs and AUC over all pairs (failures never succeed).

    AUC = (1/T) * sum_{t=1..T} fraction of pairs whose statistic <= t.
    """
    if not evaluations:
        raise ValueError("no evaluations to aggregate")
    if statistic not in ("max", "mean"):
        raise ValueError("statistic must be 'max' or 'mean'")
    good = [e for e in evaluations if e.ok]
    mae = float(np.mean([e.errors.max() for e in good])) if good else float("nan")
    mee = float(np.mean([np.median(e.errors) for e in good])) if good else float("nan")
    curve = success_curve(evaluations, threshold, statistic)
    return Aggregate(mae, mee, float(curve.mean()), len(evaluations), len(evaluations) - len(good), curve)


# ---------------------------------------------------------------------------
# ground truth and reports


@dataclass
class GroundTruthPair:
    pair_id: str
    moving: str
    fixed: str
    points_m: np.ndarray
    points_f: np.ndarray


def read_ground_truth(path) -> GroundTruthPair:
    path = Path(path)
    doc = json.loads(path.read_text())
    pm = np.asarray(doc["points_m"], np.float64).reshape(-1, 2)
    pf = np.asarray(doc["points_f"], np.float64).reshape(-1, 2)
    if len(pm) != len(pf):
        raise ValueError(f"{path}: points_m and points_f differ in length")
    return GroundTruthPair(doc.get("pair", path.stem), doc["moving image"], doc["fixed image"], pm, pf)


def write_ground_truth(path, gt: GroundTruthPair):
    doc = {"pair": gt.pair_id, "moving image": gt.moving, "fixed image": gt.fixed,
           "points_m": np.asarray(gt.points_m).tolist(), "points_f": np.asarray(gt.points_f).tolist()}
    Path(path).write_text(json.dumps(doc, indent=1))


def overlay(fixed: np.ndarray, moving: np.ndarray, M) -> np.ndarray:
    """Moving image warped by M in red, fixed image in green (uint8 RGB)."""
    def gray(x):
        x = np.asarray(x, np.float64)
        return x[..., 1] if x.ndim == 3 else x
    f = gray(fixed)
    w = geometry.warp_image(gray(moving), M, f.shape)
    out = np.zeros(f.shape + (3,), np.uint8)
    out[..., 0] = np.clip(w * 255, 0, 255).round()
    out[..., 1] = np.clip(f * 255, 0, 255).round()
    return out


def write_report(out_dir, results: dict, threshold: int = DEFAULT_THRESHOLD, statistic: str = "max",
                 overlays: Optional[dict] = None):
    """Write metrics.txt / metrics.json / curve_<dataset>.csv and overlay PNGs.

    ``results`` maps dataset name -> list of PairEvaluation; ``overlays`` maps
    pair id -> (fixed, moving, M).
    """
    import cv2
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, doc = [], {}
    for name, evals in results.items():
        agg = aggregate(evals, threshold, statistic)
        doc[name] = agg.to_dict()
        doc[name]["per_pair"] = {e.pair_id: (e.statistic(statistic) if e.ok else None) for e in evals}
        rows.append(f"{name:<16}{agg.mMAE:>10.3f}{agg.mMEE:>10.3f}{agg.AUC:>10.3f}{agg.n_failed:>8d}")
        with open(out / f"curve_{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold_px", "success_fraction"])
            for t, v in zip(range(1, threshold + 1), agg.curve):
                w.writerow([t, f"{v:.6f}"])
    header = f"{'dataset':<16}{'mMAE':>10}{'mMEE':>10}{'AUC@' + str(threshold):>10}{'failed':>8}"
    (out / "metrics.txt").write_text("\n".join([header] + rows) + "\n")
    (out / "metrics.json").write_text(json.dumps({"threshold": threshold, "statistic": statistic,
                                                  "datasets": doc}, indent=1))
    for pid, (fixed, moving, M) in (overlays or {}).items():
        cv2.imwrite(str(out / f"overlay_{pid}.png"), overlay(fixed, moving, M)[..., ::-1])
    return doc
