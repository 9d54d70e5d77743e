"""End-to-end orchestration.

Track 1: tile -> segment (x3 TTA) -> stitch -> components -> dedup ->
patch -> 3 classifiers x 3 TTA -> 9 features -> stump forest -> threshold.
Track 2: rescale -> 3 classifiers x 5 TTA -> mean of 15 -> threshold.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import cv2
import numpy as np

from .candidates import binarize, components_to_detections, deduplicate, extract_components
from .core import Annotation, Detection, ImageRef, Label, Point, ProbabilityMap, Stage, check_raster
from .dataset import PatchSpec, extract_patch, label_candidates
from .ensemble import (FeatureVector, ForestParams, StumpForest, ThresholdReport, assemble_features,
                       average_probs, fit_forest, sweep_detection_threshold)
from .models import EnsembleRoster, ViewContext, run_classifier, run_segmenter, thread_safe
from .tiling import plan_tiles, stitch
from .tta import TtaPolicy, average_seg_tta, item_seed, make_views

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Track1Config:
    window: int = 512
    overlap: int = 256
    merge: str = "mean"
    seg_threshold: float = 0.5
    connectivity: int = 8
    min_area: int = 10
    dedup_radius: float = 30.0
    mask_radius: int = 45
    patch_size: int = 140
    border_policy: str = "mirror"
    crop_fraction: float = 0.85
    seed: int = 0
    decision_threshold: Optional[float] = None  # None: take it from the forest, else 0.5
    match_radius: float = 30.0
    n_estimators: int = 260
    negative_ratio: Optional[float] = 5.0  # negatives kept per positive when fitting; None keeps all
    sweep_epsilon: float = 0.01
    sweep_grid: float = 0.001

    def __post_init__(self):
        if not 0 <= self.overlap < self.window:
            raise ValueError("overlap must satisfy 0 <= overlap < window")
        if not 0 <= self.seg_threshold <= 1:
            raise ValueError("seg_threshold must lie in [0, 1]")
        if self.decision_threshold is not None and not 0 <= self.decision_threshold <= 1:
            raise ValueError("decision_threshold must lie in [0, 1]")
        if self.negative_ratio is not None and self.negative_ratio <= 0:
            raise ValueError("negative_ratio must be positive")
        PatchSpec(self.patch_size, self.border_policy)


@dataclass(frozen=True)
class Track2Config:
    input_size: int = 128
    tta_k: int = 5
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.input_size < 1:
            raise ValueError("input_size must be >= 1")
        if self.tta_k != 5:
            raise ValueError("track 2 uses five TTA views")
        if not 0 <= self.threshold <= 1:
            raise ValueError("threshold must lie in [0, 1]")


def _pmap(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# -- stage 1 ----------------------------------------------------------------

def segment_image(image: np.ndarray, ref: ImageRef, cfg: Track1Config, segmenter,
                  workers: int = 1) -> ProbabilityMap:
    """Stitched image-frame probability map from per-tile TTA predictions."""
    h, w = image.shape[:2]
    plan = plan_tiles(w, h, cfg.window, cfg.overlap)
    seg = thread_safe(segmenter) if workers > 1 else segmenter

    def one(i_origin):
        i, (x, y) = i_origin
        tw, th = plan.tile_size((x, y))
        tile = image[y:y + th, x:x + tw]
        policy = TtaPolicy("seg3", seed=item_seed(cfg.seed, ref.id, i), allow_rotation=tw == th)
        views = make_views(tile, policy)
        maps = [ProbabilityMap(run_segmenter(seg, v.pixels,
                                             ViewContext(ref.id, origin=(x, y), transform=v.transform,
                                                         view_index=k)))
                for k, v in enumerate(views)]
        return average_seg_tta(maps, [v.transform for v in views])

    tile_maps = _pmap(one, list(enumerate(plan.origins)), workers)
    return stitch(tile_maps, plan, cfg.merge)


def stage1_candidates(image: np.ndarray, ref: ImageRef, cfg: Track1Config, segmenter,
                      workers: int = 1) -> list[Detection]:
    pmap = segment_image(image, ref, cfg, segmenter, workers)
    mask = binarize(pmap, cfg.seg_threshold)
    comps = extract_components(mask, pmap, cfg.connectivity, cfg.min_area)
    return deduplicate(components_to_detections(comps, ref.id), cfg.dedup_radius)


# -- stage 2 ----------------------------------------------------------------

def _inward(p: Point, w: int, h: int) -> Point:
    return Point(min(max(p.x, 0.0), w - 1.0), min(max(p.y, 0.0), h - 1.0))


def candidate_features(image: np.ndarray, ref: ImageRef, points: Sequence[Point], cfg: Track1Config,
                       roster: EnsembleRoster, workers: int = 1, seed_key: str = "") -> list[FeatureVector]:
    """Nine-value (3 classifiers x 3 TTA views) feature vector per point.

    TTA randomness is keyed by (image id, position in ``points``), so the
    result does not depend on scheduling.
    """
    h, w = image.shape[:2]
    spec = PatchSpec(cfg.patch_size, cfg.border_policy)
    classifiers = [thread_safe(c) for c in roster.classifiers] if workers > 1 else list(roster.classifiers)
    base = roster.tta_policy
    key = ref.id + seed_key

    def one(i_point):
        i, p = i_point
        center = _inward(p, w, h)
        patch = extract_patch(image, center, spec)
        cx, cy = center.rounded()
        used = Point(float(min(cx, w - 1)), float(min(cy, h - 1)))
        policy = TtaPolicy(base.mode, base.k, base.crop_fraction,
                           item_seed(cfg.seed + 1, key, i), base.allow_rotation)
        views = make_views(patch, policy)
        probs = {}
        for m, clf in enumerate(classifiers):
            for t, v in enumerate(views):
                ctx = ViewContext(ref.id, center=used, transform=v.transform, view_index=t,
                                  crop_fraction=v.crop_fraction)
                probs[(m, t)] = run_classifier(clf, v.pixels, ctx)
        return assemble_features(probs, (len(classifiers), len(views)))

    return _pmap(one, list(enumerate(points)), workers)


def track1_roster(classifiers, cfg: Track1Config = Track1Config()) -> EnsembleRoster:
    return EnsembleRoster(tuple(classifiers), TtaPolicy("cls3_crop", crop_fraction=cfg.crop_fraction))


def resolve_threshold(cfg: Track1Config, forest: StumpForest) -> float:
    if cfg.decision_threshold is not None:
        return cfg.decision_threshold
    return float(forest.meta.get("threshold", 0.5))


def detect(image: np.ndarray, ref: ImageRef, cfg: Track1Config, segmenter, roster: EnsembleRoster,
           forest: StumpForest, workers: int = 1, threshold: Optional[float] = None) -> list[Detection]:
    """Verified detections with the forest probability as score, sorted by
    score descending (ties by y, then x)."""
    image = check_raster(image)
    if image.shape[:2] != (ref.height, ref.width):
        raise ValueError(f"image is {image.shape[1]}x{image.shape[0]} but {ref.id} declares "
                         f"{ref.width}x{ref.height}")
    thr = resolve_threshold(cfg, forest) if threshold is None else threshold
    cands = stage1_candidates(image, ref, cfg, segmenter, workers)
    if not cands:
        return []
    feats = candidate_features(image, ref, [c.point for c in cands], cfg, roster, workers)
    if feats[0].layout != (3, 3):
        raise ValueError(f"track 1 expects a (3, 3) feature layout, got {feats[0].layout}")
    probs = forest.predict_proba(np.array([f.values for f in feats]))
    out = [Detection(c.point, float(p), Stage.VERIFIED, ref.id,
                     meta={"stage1_score": c.score, "features": f.values})
           for c, f, p in zip(cands, feats, probs) if p >= thr]
    out.sort(key=lambda d: (-d.score, d.point.y, d.point.x))
    return out


@dataclass
class TrainingImage:
    image: np.ndarray
    ref: ImageRef
    annotations: list[Annotation] = field(default_factory=list)

    @property
    def mitoses(self) -> list[Annotation]:
        return [a for a in self.annotations if a.label == Label.MITOSIS]


def fit_track1_ensemble(train: Sequence[TrainingImage], val: Sequence[TrainingImage], segmenter,
                        roster: EnsembleRoster, cfg: Track1Config = Track1Config(), seed: int = 0,
                        workers: int = 1):
    """Fit the stump forest on stage-1 candidates of ``train`` and pick the
    decision threshold by sweeping F1 on ``val`` (``train`` when empty).

    Returns (forest, threshold report, per-image labelled candidate counts).
    """
    X, y, counts = [], [], {}
    rng = np.random.default_rng(seed)
    for item in train:
        dets = stage1_candidates(item.image, item.ref, cfg, segmenter, workers)
        labeled = label_candidates(item.mitoses, dets, cfg.match_radius)
        counts[item.ref.id] = dict(labeled.counts)
        pos = labeled.positives
        neg = labeled.negatives
        if cfg.negative_ratio is not None and pos and len(neg) > cfg.negative_ratio * len(pos):
            keep = np.sort(rng.choice(len(neg), size=int(cfg.negative_ratio * len(pos)), replace=False))
            neg = [neg[i] for i in keep]
        records = pos + neg
        feats = candidate_features(item.image, item.ref, [r.point for r in records], cfg, roster,
                                   workers, seed_key=":train")
        X.extend(f.values for f in feats)
        y.extend([1] * len(pos) + [0] * len(neg))
    if not any(y):
        raise ValueError("no positives: stage 1 found no candidates and no ground truth is annotated")
    forest = fit_forest(np.asarray(X), np.asarray(y), ForestParams(cfg.n_estimators, 1, None, seed))

    sweep_on = list(val) or list(train)
    pairs = []
    for item in sweep_on:
        dets = detect(item.image, item.ref, cfg, segmenter, roster, forest, workers, threshold=0.0)
        pairs.append((dets, item.mitoses))
    report = sweep_detection_threshold(pairs, cfg.match_radius, cfg.sweep_epsilon, cfg.sweep_grid)
    forest.meta.update({
        "threshold": report.best_threshold,
        "layout": [3, 3],
        "classifiers": roster.names,
        "n_train": len(y),
        "n_train_positive": int(sum(y)),
    })
    return forest, report, counts


# -- track 2 ----------------------------------------------------------------

def track2_roster(classifiers, cfg: Track2Config = Track2Config()) -> EnsembleRoster:
    return EnsembleRoster(tuple(classifiers), TtaPolicy("cls5", seed=cfg.seed))


def atypical_features(patch: np.ndarray, cfg: Track2Config, roster: EnsembleRoster,
                      patch_id: str = "") -> FeatureVector:
    """The 15 probabilities (3 classifiers x 5 TTA views) for one rescaled patch."""
    patch = check_raster(patch)
    s = cfg.input_size
    if patch.shape[:2] != (s, s):
        patch = cv2.resize(patch, (s, s), interpolation=cv2.INTER_LINEAR)
    views = make_views(patch, TtaPolicy("cls5", seed=item_seed(cfg.seed, patch_id)))
    probs = {}
    for m, clf in enumerate(roster.classifiers):
        for t, v in enumerate(views):
            ctx = ViewContext(patch_id, transform=v.transform, view_index=t)
            probs[(m, t)] = run_classifier(clf, v.pixels, ctx)
    return assemble_features(probs, (len(roster.classifiers), len(views)))


def classify_atypical(patch: np.ndarray, cfg: Track2Config, roster: EnsembleRoster,
                      patch_id: str = "") -> tuple[float, str]:
    """Equal-weight mean of the 15 probabilities; ``atypical`` iff it reaches the threshold."""
    p = average_probs(atypical_features(patch, cfg, roster, patch_id))
    return p, ("atypical" if p >= cfg.threshold else "normal")
