"""Command-line entry point: ``mitodet <command> ...``.

Exit codes: 0 success, 2 bad input, 3 internal error. Errors are printed to
stderr as a JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import load_config
from .core import ImageRef, Label
from .dataset import MaskSpec, PatchSpec, extract_patch, label_candidates, synthesize_mask
from .ensemble import StumpForest, sweep_detection_threshold
from .evaluation import grouped_report, match_detections
from .io import FormatError
from .pipeline import TrainingImage, classify_atypical, detect, fit_track1_ensemble

log = logging.getLogger("mitodet")

EXIT_BAD_INPUT = 2
EXIT_INTERNAL = 3


class BadInput(Exception):
    pass


def _workers(args, cfg=None) -> int:
    if getattr(args, "workers", None):
        return args.workers
    if cfg is not None and cfg.workers:
        return int(cfg.workers)
    return os.cpu_count() or 1


def _load_image(path: Path) -> tuple[np.ndarray, ImageRef]:
    img = io.read_raster(path)
    return img, ImageRef(path.stem, img.shape[1], img.shape[0])


def _training_dir(path) -> list[TrainingImage]:
    """A directory of ``<id>.json`` annotation files next to ``<id>.png|tif`` images."""
    out = []
    for image_id, (ref, anns) in io.read_annotation_dir(path).items():
        img = io.read_raster(io.find_image(path, image_id))
        if img.shape[:2] != (ref.height, ref.width):
            raise BadInput(f"{image_id}: image size {img.shape[1]}x{img.shape[0]} disagrees with annotations")
        out.append(TrainingImage(img, ref, anns))
    return out


def _load_forest(path) -> StumpForest:
    if path is None:
        raise BadInput("no forest given (set track1.forest in the config or pass --forest)")
    return StumpForest.from_dict(io.read_json(path))


# -- commands ---------------------------------------------------------------

def cmd_build_dataset(args) -> int:
    out = Path(args.out)
    ann = io.read_annotation_dir(args.annotations)
    if not ann:
        raise BadInput(f"no annotation files in {args.annotations}")
    stage1 = io.read_prediction_dir(args.candidates) if args.candidates else {}
    mask_spec = MaskSpec(args.mask_radius)
    patch_spec = PatchSpec(args.patch_size, args.border)
    entries = []
    totals = {"gt": 0, "tp": 0, "fn": 0, "fp": 0}
    for image_id, (ref, anns) in ann.items():
        img = io.read_raster(io.find_image(args.images, image_id))
        if img.shape[:2] != (ref.height, ref.width):
            raise BadInput(f"{image_id}: image size disagrees with annotations")
        mask = synthesize_mask(anns, ref.width, ref.height, mask_spec, include_hard_negatives=True)
        io.write_png(out / "masks" / f"{image_id}.png", mask)
        gt = [a for a in anns if a.label == Label.MITOSIS]
        dets = [d for d in stage1.get(image_id, [])]
        labeled = label_candidates(gt, dets, args.match_radius)
        for k in totals:
            totals[k] += labeled.counts[k]
        for n, rec in enumerate(labeled.positives + labeled.negatives):
            rel = f"patches/{image_id}_{n:06d}_{rec.provenance}.png"
            io.write_png(out / rel, extract_patch(img, rec.point, patch_spec))
            entries.append({"patch_path": rel, "label": rec.label, "source_image": image_id,
                            "x": rec.point.x, "y": rec.point.y, "provenance": rec.provenance})
    manifest = {"schema_version": io.SCHEMA_VERSION, "mask_radius": args.mask_radius,
                "patch_size": args.patch_size, "border_policy": args.border,
                "match_radius": args.match_radius, "counts": totals, "entries": entries}
    io.write_json(out / "manifest.json", manifest)
    print(json.dumps({"images": len(ann), **totals}))
    return 0


def cmd_detect(args) -> int:
    cfg = load_config(args.config, args.set)
    workers = _workers(args, cfg)
    forest = _load_forest(args.forest or cfg.forest)
    segmenter = cfg.load_segmenter()
    roster = cfg.track1_roster()
    paths = io.list_images(args.images)
    if not paths:
        raise BadInput(f"no images in {args.images}")
    out = Path(args.out)
    threshold = args.threshold
    for p in paths:
        img, ref = _load_image(p)
        dets = detect(img, ref, cfg.track1, segmenter, roster, forest, workers, threshold)
        used = threshold if threshold is not None else (
            cfg.track1.decision_threshold if cfg.track1.decision_threshold is not None
            else float(forest.meta.get("threshold", 0.5)))
        io.write_detections(out / f"{ref.id}.json", ref.id, used, dets)
        log.info("%s: %d detections", ref.id, len(dets))
    return 0


def cmd_classify(args) -> int:
    cfg = load_config(args.config, args.set)
    roster = cfg.track2_roster()
    paths = io.list_images(args.patches)
    if not paths:
        raise BadInput(f"no patches in {args.patches}")
    rows = []
    for p in paths:
        prob, label = classify_atypical(io.read_raster(p), cfg.track2, roster, patch_id=p.stem)
        rows.append((p.stem, prob, label))
    io.write_json(args.out, io.classification_to_dict(Path(args.patches).name, cfg.track2.threshold, rows))
    return 0


def cmd_fit_ensemble(args) -> int:
    cfg = load_config(args.config, args.set)
    workers = _workers(args, cfg)
    train = _training_dir(args.train)
    val = _training_dir(args.val) if args.val else []
    if not train:
        raise BadInput(f"no training images in {args.train}")
    try:
        forest, report, counts = fit_track1_ensemble(train, val, cfg.load_segmenter(), cfg.track1_roster(),
                                                     cfg.track1, args.seed, workers)
    except ValueError as e:
        if "no positives" in str(e):
            raise BadInput(str(e)) from None
        raise
    forest.meta["candidate_counts"] = counts
    out = Path(args.out)
    io.write_json(out, forest.to_dict())
    report_path = Path(args.report) if args.report else out.with_name(out.stem + "_threshold.json")
    io.write_json(report_path, {"schema_version": io.SCHEMA_VERSION, **report.to_dict()})
    print(json.dumps({"best_threshold": report.best_threshold, "best_f1": report.best_f1,
                      "plateau": list(report.plateau)}))
    return 0


def _pred_gt_pairs(pred_dir, gt_dir):
    preds = io.read_prediction_dir(pred_dir)
    gts = io.read_annotation_dir(gt_dir)
    if not gts:
        raise BadInput(f"no annotation files in {gt_dir}")
    unknown = sorted(set(preds) - set(gts))
    if unknown:
        raise BadInput(f"predictions for images without ground truth: {unknown}")
    return preds, gts


def cmd_evaluate(args) -> int:
    preds, gts = _pred_gt_pairs(args.pred, args.gt)
    per_image, groups = {}, {}
    for image_id, (ref, anns) in gts.items():
        mitoses = [a for a in anns if a.label == Label.MITOSIS]
        per_image[image_id] = match_detections(preds.get(image_id, []), mitoses, args.radius,
                                               optimal=args.optimal).counts
        groups[image_id] = ref.group if ref.group is not None else "all"
    report = grouped_report(per_image, groups, threshold=None, radius=args.radius,
                            matcher="optimal" if args.optimal else "greedy")
    io.write_json(args.out, {"schema_version": io.SCHEMA_VERSION, **report.to_dict()})
    print(report.table())
    return 0


def cmd_sweep(args) -> int:
    preds, gts = _pred_gt_pairs(args.pred, args.gt)
    pairs = [(preds.get(i, []), [a for a in anns if a.label == Label.MITOSIS]) for i, (_, anns) in gts.items()]
    report = sweep_detection_threshold(pairs, args.radius, args.epsilon, args.grid)
    io.write_json(args.out, {"schema_version": io.SCHEMA_VERSION, **report.to_dict()})
    print(json.dumps(report.to_dict(curve=False)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mitodet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", required=True)
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. track1.seg_threshold=0.4")
        sp.add_argument("--workers", type=int, default=None)

    b = sub.add_parser("build-dataset", help="masks, candidate patches and a manifest from annotations")
    b.add_argument("--annotations", required=True)
    b.add_argument("--images", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--mask-radius", type=int, default=45)
    b.add_argument("--patch-size", type=int, default=140)
    b.add_argument("--border", choices=("mirror", "zero"), default="mirror")
    b.add_argument("--candidates", help="directory of stage-1 prediction files")
    b.add_argument("--match-radius", type=float, default=30.0)
    b.set_defaults(func=cmd_build_dataset)

    d = sub.add_parser("detect", help="track-1 detection on a directory of ROI images")
    with_config(d)
    d.add_argument("--images", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--forest")
    d.add_argument("--threshold", type=float)
    d.set_defaults(func=cmd_detect)

    c = sub.add_parser("classify", help="track-2 atypical classification of patch images")
    with_config(c)
    c.add_argument("--patches", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_classify)

    f = sub.add_parser("fit-ensemble", help="fit the track-1 stump forest and sweep its threshold")
    with_config(f)
    f.add_argument("--train", required=True)
    f.add_argument("--val")
    f.add_argument("--out", required=True)
    f.add_argument("--report")
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_fit_ensemble)

    e = sub.add_parser("evaluate", help="precision/recall/F1 of predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--radius", type=float, default=30.0)
    e.add_argument("--optimal", action="store_true", help="optimal instead of greedy matching")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="F1 versus decision threshold with plateau analysis")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--radius", type=float, default=30.0)
    s.add_argument("--epsilon", type=float, default=0.01)
    s.add_argument("--grid", type=float, default=0.001)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)
    return p


def _fail(code: int, exc: BaseException) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (BadInput, FormatError, FileNotFoundError, ValueError, KeyError) as e:
        return _fail(EXIT_BAD_INPUT, e)
    except Exception as e:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        return _fail(EXIT_INTERNAL, e)


if __name__ == "__main__":
    sys.exit(main())
