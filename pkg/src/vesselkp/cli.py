"""Command-line entry points: train, detect, register, eval.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import glob
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, geometry, metrics
from .config import ConfigError, load_config, resolve
from .data import ManifestError, load_manifest, load_samples, phantom_dataset, read_image, to_working, write_image
from .matching import (RegistrationError, read_homography, read_matches, register_pair, write_homography,
                       write_matches)
from .network import load_checkpoint, save_checkpoint, segment, to_gray
from .trainer import TrainingError, predict, train
from .types import Homography, KeypointSet, write_annotation

log = logging.getLogger("vesselkp")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _fail(code, msg):
    print(f"error: {msg}", file=sys.stderr)
    return code


def _write_run_meta(run_dir: Path, resolved: dict, command: str):
    run_dir.mkdir(parents=True, exist_ok=True)
    meta = {"tool": "vesselkp", "version": __version__, "command": command, "config": resolved}
    (run_dir / "resolved_config.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# train


def _training_samples(rc, working):
    data = rc.data
    if "manifest" in data:
        train_set = load_samples(load_manifest(data["manifest"]), working)
    elif "phantom_subjects" in data:
        frame = tuple(data.get("phantom_frame", working))
        train_set = phantom_dataset(int(data["phantom_subjects"]), frame,
                                    labeled_subjects=int(data.get("phantom_labeled", 0)),
                                    seed=int(data.get("phantom_seed", rc.run["seed"])))
    else:
        raise ConfigError("data: set either data.manifest or data.phantom_subjects")
    val = load_samples(load_manifest(data["val_manifest"]), working) if "val_manifest" in data else None
    return train_set, val


def cmd_train(args) -> int:
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.deterministic:
        overrides.append("run.deterministic=true")
    if args.run_dir:
        overrides.append(f'run.run_dir="{args.run_dir}"')
    try:
        rc = resolve(load_config(args.config, overrides))
        rc.trainer = replace(rc.trainer, seed=rc.run["seed"], deterministic=bool(rc.run["deterministic"]))
        samples, val = _training_samples(rc, rc.network.working_size)
    except (ConfigError, ManifestError) as exc:
        return _fail(EXIT_CONFIG, exc)
    if not any(s.labeled for s in samples):
        return _fail(EXIT_CONFIG, "no labeled images: the supervised detector loss L_det_sup needs at least one "
                                  "annotated image")
    run_dir = Path(rc.run["run_dir"])
    _write_run_meta(run_dir, rc.to_dict(), "train")
    try:
        state, report = train(samples, rc.trainer, rc.network, rc.losses, val=val, run_dir=run_dir)
    except (TrainingError, ValueError) as exc:
        return _fail(EXIT_RUNTIME, exc)
    (run_dir / "train_report.json").write_text(json.dumps(report.to_dict(), indent=1))
    print(f"trained {rc.trainer.max_epochs} epochs; checkpoints: {len(report.checkpoints)}; run dir {run_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# detect


def _load_state(path):
    try:
        return load_checkpoint(path)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        raise RuntimeError(f"cannot load checkpoint {path}: {exc}")


def cmd_detect(args) -> int:
    try:
        state = _load_state(args.checkpoint)
    except RuntimeError as exc:
        return _fail(EXIT_RUNTIME, exc)
    paths = sorted(glob.glob(args.images))
    if not paths:
        return _fail(EXIT_RUNTIME, f"no images match {args.images!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    working = state.net.cfg.working_size
    for p in paths:
        try:
            img = to_gray(read_image(p))
        except (OSError, ValueError) as exc:
            return _fail(EXIT_RUNTIME, exc)
        w_img, _, rec = to_working(img, None, working)
        try:
            P, _ = predict(state, [w_img], args.passes, args.nms_threshold, args.nms_radius)
        except RuntimeError as exc:
            return _fail(EXIT_RUNTIME, f"{p}: checkpoint incompatible with image: {exc}")
        kps = geometry.nms_extract(P[0], args.nms_threshold, args.nms_radius)
        coords = rec.to_original(kps.coords)
        coords[:, 0] = np.minimum(coords[:, 0], np.nextafter(img.shape[1], 0))
        coords[:, 1] = np.minimum(coords[:, 1], np.nextafter(img.shape[0], 0))
        orig = KeypointSet(coords, kps.scores, img.shape[:2]) if len(kps) else KeypointSet.empty(img.shape[:2])
        stem = Path(p).stem
        write_annotation(out / f"{stem}.json", Path(p).name, orig, with_scores=True)
        write_image(out / f"{stem}_prob.png", P[0])
        if args.segmentation:
            hm = geometry.render_heatmap(kps, state_sigma(state), 13, frame=w_img.shape)
            S = segment(state.seg_net, w_img, hm).values
            ov = np.stack([np.clip(S, 0, 1), np.clip(w_img, 0, 1), np.clip(w_img, 0, 1)], axis=-1)
            write_image(out / f"{stem}_seg.png", ov)
        print(f"{p}: {len(kps)} keypoints")
    return EXIT_OK


def state_sigma(state):
    return float(state.extra.get("heatmap_sigma", 0.2))


# ---------------------------------------------------------------------------
# register


def _read_pairs(path):
    path = Path(path)
    doc = json.loads(path.read_text())
    rows = doc["pairs"] if isinstance(doc, dict) else doc
    base = path.parent
    pairs = []
    for i, r in enumerate(rows):
        pid = str(r.get("pair", f"pair{i:03d}"))
        pairs.append((pid, base / r["moving"], base / r["fixed"]))
    return pairs


def cmd_register(args) -> int:
    try:
        state = _load_state(args.checkpoint)
        pairs = _read_pairs(args.pairs)
        imported = read_matches(args.import_matches) if args.import_matches else None
    except (RuntimeError, OSError, KeyError, ValueError) as exc:
        return _fail(EXIT_RUNTIME, exc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rc = _register_cfg(args, state)
    failures = {}
    for pid, pm, pf in pairs:
        try:
            img_m, img_f = read_image(pm), read_image(pf)
            hook = None
            if imported is not None:
                if pid not in imported:
                    raise RegistrationError(f"no imported matches for pair {pid}")
                hook = imported[pid]
            reg = register_pair(img_m, img_f, state, rc, imported=hook)
        except (RegistrationError, OSError, ValueError) as exc:
            failures[pid] = str(exc)
            print(f"{pid}: failed ({exc})")
            continue
        write_matches(out / f"matches_{pid}.json", pid, reg.matches)
        write_homography(out / f"homography_{pid}.json", reg.M, pid)
        ov = metrics.overlay(to_gray(img_f), to_gray(img_m), reg.M)
        write_image(out / f"overlay_{pid}.png", ov.astype(np.float64) / 255.0)
        print(f"{pid}: {reg.diagnostics['matches']} matches, {reg.diagnostics['inliers']} inliers")
    (out / "failures.json").write_text(json.dumps(failures, indent=1))
    print(f"registered {len(pairs) - len(failures)}/{len(pairs)} pairs; {len(failures)} failed")
    return EXIT_OK


def _register_cfg(args, state):
    from .matching import RegisterConfig
    return RegisterConfig(working_size=tuple(state.net.cfg.working_size), nms_threshold=args.nms_threshold,
                          nms_radius=args.nms_radius, ratio=None if args.ratio <= 0 else args.ratio,
                          mutual=not args.no_mutual, seed=args.seed or 0)


# ---------------------------------------------------------------------------
# eval


def _gt_files(path):
    path = Path(path)
    if path.is_dir():
        return sorted(path.glob("*.json"))
    doc = json.loads(path.read_text())
    rows = doc.get("pairs", []) if isinstance(doc, dict) else doc
    return [path.parent / r for r in rows]


def cmd_eval(args) -> int:
    try:
        files = _gt_files(args.gt)
        gts = [metrics.read_ground_truth(f) for f in files]
    except (OSError, KeyError, ValueError) as exc:
        return _fail(EXIT_RUNTIME, exc)
    if not gts:
        return _fail(EXIT_RUNTIME, "ground-truth manifest lists no pairs")
    if (args.homographies is None) == (args.checkpoint is None):
        return _fail(EXIT_CONFIG, "give exactly one of --homographies or --checkpoint")
    state = None
    if args.checkpoint:
        try:
            state = _load_state(args.checkpoint)
        except RuntimeError as exc:
            return _fail(EXIT_RUNTIME, exc)
    evals, overlays = [], {}
    base = Path(args.gt).parent if Path(args.gt).is_file() else Path(args.gt)
    for gt in gts:
        M = None
        if state is None:
            hp = Path(args.homographies) / f"homography_{gt.pair_id}.json"
            if hp.exists():
                M = read_homography(hp)
        else:
            try:
                M = register_pair(read_image(base / gt.moving), read_image(base / gt.fixed), state,
                                  _register_cfg(args, state)).M
            except (RegistrationError, OSError) as exc:
                log.warning("%s: %s", gt.pair_id, exc)
        if M is None:
            evals.append(metrics.PairEvaluation.failed(gt.pair_id))
            continue
        evals.append(metrics.PairEvaluation(gt.pair_id, metrics.pair_errors(M, gt.points_m, gt.points_f)))
        if args.overlays:
            try:
                overlays[gt.pair_id] = (read_image(base / gt.fixed), read_image(base / gt.moving), M)
            except (OSError, ValueError):
                pass
    doc = metrics.write_report(args.out, {args.dataset: evals}, args.auc_threshold, args.statistic, overlays)
    print((Path(args.out) / "metrics.txt").read_text(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="vesselkp", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"vesselkp {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--deterministic", action="store_true")

    def infer(p):
        p.add_argument("--nms-threshold", type=float, default=0.5)
        p.add_argument("--nms-radius", type=int, default=10)

    p = sub.add_parser("train", help="train a model from a TOML config")
    p.add_argument("--config", required=True)
    p.add_argument("--override", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--run-dir")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="detect keypoints on images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True, help="glob pattern")
    p.add_argument("--out", required=True)
    p.add_argument("--passes", type=int, default=2)
    p.add_argument("--segmentation", action="store_true", help="also write a segmentation overlay")
    infer(p)
    common(p)
    p.set_defaults(func=cmd_detect)

    def reg_opts(p):
        infer(p)
        p.add_argument("--ratio", type=float, default=0.9, help="<= 0 disables the ratio test")
        p.add_argument("--no-mutual", action="store_true")

    p = sub.add_parser("register", help="register image pairs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", required=True, help='JSON {"pairs": [{"pair", "moving", "fixed"}]}')
    p.add_argument("--out", required=True)
    p.add_argument("--import-matches", help="external match file; bypasses descriptor matching")
    reg_opts(p)
    common(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("eval", help="score homographies against ground-truth keypoints")
    p.add_argument("--gt", required=True, help="directory of ground-truth pair JSONs or a manifest listing them")
    p.add_argument("--homographies", help="directory with homography_<pair>.json files")
    p.add_argument("--checkpoint", help="register pairs on the fly instead")
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", default="dataset")
    p.add_argument("--auc-threshold", type=int, default=metrics.DEFAULT_THRESHOLD)
    p.add_argument("--statistic", choices=("max", "mean"), default="max")
    p.add_argument("--overlays", action="store_true")
    reg_opts(p)
    common(p)
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.deterministic or args.seed is not None:
        from .trainer import set_deterministic
        set_deterministic(args.seed or 0)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
