"""Exit criteria. Each test checks one criterion at its stated tolerance and
runtime budget; a PASS/FAIL line per criterion is printed after the run."""

import time
import warnings
from contextlib import contextmanager

import numpy as np
import pytest

from mitodet import io
from mitodet.core import Annotation, Detection, Label, Point, ProbabilityMap, Stage, distance
from mitodet.dataset import MaskSpec, label_candidates, positive_total, synthesize_mask
from mitodet.ensemble import ForestParams, fit_forest, sweep_threshold, tree_draws
from mitodet.evaluation import MatchCounts, balanced_accuracy, match_detections, prf1
from mitodet.models import ViewContext, oracle_classifier, oracle_segmenter
from mitodet.pipeline import (TrainingImage, Track1Config, Track2Config, atypical_features,
                              candidate_features, detect, fit_track1_ensemble, track1_roster,
                              track2_roster)
from mitodet.synthetic import make_world
from mitodet.tiling import plan_tiles
from mitodet.tta import GROUP, apply_map, invert_map
from oracles import exhaustive_best_feature, f1_at

pytestmark = pytest.mark.acceptance


@contextmanager
def budget(seconds):
    t0 = time.perf_counter()
    yield
    elapsed = time.perf_counter() - t0
    assert elapsed < seconds, f"took {elapsed:.2f}s, budget {seconds}s"


def criterion(record_property, name):
    record_property("criterion", name)


# reference tallies of the candidate set used to train the verification CNNs
REF_GT, REF_TP, REF_FN, REF_POSITIVES = 70_971, 67_206, 3_047, 141_224


def test_positive_accounting(record_property):
    criterion(record_property, "positive accounting |pos| = gt + tp + fn (141,224)")
    assert positive_total({"gt": REF_GT, "tp": REF_TP, "fn": REF_FN, "fp": 0}) == REF_POSITIVES
    if REF_GT - REF_TP != REF_FN:
        warnings.warn(f"reference tallies are inconsistent: gt - tp = {REF_GT - REF_TP}, "
                      f"but fn is listed as {REF_FN}; label_candidates always uses fn = gt - tp")

    side = int(np.ceil(np.sqrt(REF_GT)))
    idx = np.arange(REF_GT)
    xs, ys = (idx % side) * 100.0 + 10, (idx // side) * 100.0 + 10
    gt = [Annotation(Point(x, y), Label.MITOSIS, "mock") for x, y in zip(xs, ys)]
    dets = [Detection(Point(x + 3, y - 2), 0.9, Stage.SEGMENTATION, "mock")
            for x, y in zip(xs[:REF_TP], ys[:REF_TP])]
    dets += [Detection(Point(x + 50, y + 50), 0.2, Stage.SEGMENTATION, "mock") for x, y in zip(xs[:500], ys[:500])]
    with budget(1.0):
        s = label_candidates(gt, dets, 30)
    assert s.counts == {"gt": REF_GT, "tp": REF_TP, "fn": REF_GT - REF_TP, "fp": 500}
    assert len(s.positives) == s.counts["gt"] + s.counts["tp"] + s.counts["fn"]
    assert len(s.negatives) == 500


class Coded:
    """Returns (model index, view index) packed into a probability."""

    def __init__(self, m, input_size):
        self.m, self.name, self.input_size = m, f"coded{m}", input_size

    def classify(self, patch, context=ViewContext()):
        return (10 * self.m + context.view_index) / 100


def test_feature_layout(record_property):
    criterion(record_property, "feature layout: 9 (track 1), 15 (track 2), model-major")
    with budget(1.0):
        img = np.zeros((300, 300, 3), np.uint8)
        cfg = Track1Config()
        w = make_world("f", 300, 300, n_mitoses=1, n_mimickers=0, min_sep=1, margin=100, seed=0)
        (fv,) = candidate_features(img, w.ref, [Point(150, 150)], cfg,
                                   track1_roster([Coded(m, 140) for m in range(3)], cfg))
        assert len(fv.values) == 9 and fv.layout == (3, 3)
        assert fv.values == tuple((10 * m + t) / 100 for m in range(3) for t in range(3))
        fv2 = atypical_features(np.zeros((90, 90, 3), np.uint8), Track2Config(),
                                track2_roster([Coded(m, 128) for m in range(3)]), "p")
        assert len(fv2.values) == 15 and fv2.layout == (3, 5)
        assert fv2.values == tuple((10 * m + t) / 100 for m in range(3) for t in range(5))


def test_tiling_coverage(record_property):
    criterion(record_property, "tiling: 200 random sizes fully covered, last tile at edge")
    rng = np.random.default_rng(2024)
    with budget(10.0):
        for w, h in rng.integers(1, 2600, size=(200, 2)):
            plan = plan_tiles(int(w), int(h), 512, 256)
            count = np.zeros((h, w), dtype=np.int32)
            for x, y in plan.origins:
                tw, th = plan.tile_size((x, y))
                count[y:y + th, x:x + tw] += 1
            # oracle: per-pixel membership test against every origin, axis by axis
            xo = np.array(sorted({o[0] for o in plan.origins}))
            yo = np.array(sorted({o[1] for o in plan.origins}))
            px, py = np.arange(w), np.arange(h)
            cx = ((px[:, None] >= xo[None]) & (px[:, None] < xo[None] + 512)).sum(axis=1)
            cy = ((py[:, None] >= yo[None]) & (py[:, None] < yo[None] + 512)).sum(axis=1)
            assert np.array_equal(count, np.outer(cy, cx))
            assert (count >= 1).all()
            assert max(x + plan.tile_size((x, y))[0] for x, y in plan.origins) == w
            assert max(y + plan.tile_size((x, y))[1] for x, y in plan.origins) == h
            assert all(x + 512 <= w or x == 0 for x, _ in plan.origins)


def test_mask_synthesis_counts(record_property):
    criterion(record_property, "mask synthesis: 50 random centres, radius 45, exact lattice counts")
    rng = np.random.default_rng(7)
    W = H = 256  # small enough that many disks clip at the border
    with budget(10.0):
        for x, y in rng.uniform(0, [W - 1e-9, H - 1e-9], size=(50, 2)):
            mask = synthesize_mask([Annotation(Point(x, y), Label.MITOSIS, "m")], W, H, MaskSpec(45))
            expected = 0
            for py in range(max(0, int(y) - 46), min(H, int(y) + 47)):
                for px in range(max(0, int(x) - 46), min(W, int(x) + 47)):
                    if (px - x) ** 2 + (py - y) ** 2 <= 2025:
                        expected += 1
            assert int(mask.sum()) == expected


def test_tta_round_trip(record_property):
    criterion(record_property, "TTA: invert(apply) bit-exact for 8 transforms x 100 maps")
    rng = np.random.default_rng(3)
    with budget(5.0):
        for _ in range(100):
            m = ProbabilityMap(rng.random((64, 64)))
            for t in GROUP:
                assert np.array_equal(invert_map(apply_map(m, t), t).values, m.values)


def test_stump_forest_separable(record_property):
    criterion(record_property, "stump forest: 260 stumps reach training accuracy 1.0; trees match oracle")
    rng = np.random.default_rng(11)
    n, d = 400, 9
    y = (np.arange(n) % 2).astype(int)
    X = rng.random((n, d))
    X[:, 4] = np.where(y == 1, rng.uniform(0.55, 1.0, n), rng.uniform(0.0, 0.45, n))
    with budget(30.0):
        forest = fit_forest(X, y, ForestParams(260, 1, None, 17))
        assert len(forest.trees) == 260
        acc = ((forest.predict_proba(X) >= 0.5) == (y == 1)).mean()
        assert acc == 1.0
        for tree, (boot, feats) in zip(forest.trees, tree_draws(17, n, d, 260)):
            ref = exhaustive_best_feature(X[boot], y[boot], feats)
            assert ref is not None
            assert tree.feature == ref[0]
            assert tree.threshold == pytest.approx(ref[1], abs=1e-12)
            assert (tree.left, tree.right) == pytest.approx(ref[2:4], abs=1e-12)


def _scorers(annotations):
    seg = oracle_segmenter(annotations, radius=45, p_in=0.9, p_out=0.05, noise=0.0)
    clfs = [oracle_classifier(annotations, radius=15, sharpness=s, name=name)
            for s, name in ((0.3, "effb3"), (0.5, "effb5"), (0.8, "effv2s"))]
    return seg, clfs


def _fit_and_detect(workers):
    tr = make_world("train", seed=101)
    va = make_world("val", seed=102)
    roi = make_world("roi", seed=103)
    seg, clfs = _scorers(tr.annotations + va.annotations + roi.annotations)
    cfg = Track1Config()
    roster = track1_roster(clfs, cfg)
    forest, report, _ = fit_track1_ensemble([TrainingImage(tr.image, tr.ref, tr.annotations)],
                                            [TrainingImage(va.image, va.ref, va.annotations)],
                                            seg, roster, cfg, seed=0, workers=workers)
    dets = detect(roi.image, roi.ref, cfg, seg, roster, forest, workers=workers)
    return roi, forest, report, dets


def test_end_to_end_synthetic_world(record_property):
    criterion(record_property, "end-to-end: 50 mitoses + 50 mimickers, F1 >= 0.98, all within 5 px")
    with budget(120.0):
        roi, forest, report, dets = _fit_and_detect(workers=1)
    assert len(roi.mitoses) == 50 and len(roi.annotations) == 100
    assert forest.meta["threshold"] == report.best_threshold
    counts = match_detections(dets, roi.mitoses, 30).counts
    assert prf1(counts)[2] >= 0.98
    for d in dets:
        assert min(distance(d.point, a.point) for a in roi.annotations) <= 5


def test_metric_formulas(record_property):
    criterion(record_property, "metrics: prf1(1,1,1) = (0.5, 0.5, 0.5); balanced accuracy(8,2,5,5) = 0.65")
    with budget(1.0):
        assert prf1(MatchCounts(1, 1, 1)) == (0.5, 0.5, 0.5)
        assert balanced_accuracy(8, 2, 5, 5) == 0.65


def test_plateau_two_samples(record_property):
    criterion(record_property, "plateau: two-sample fixture, best F1 1.0, plateau = brute-force grid")
    with budget(5.0):
        rep = sweep_threshold([0.9, 0.1], [1, 0], epsilon=0.01, grid=0.001)
        assert rep.best_f1 == 1.0
        grid = [i / 1000 for i in range(1001)]
        ok = [t for t in grid if f1_at([0.9, 0.1], [1, 0], t) >= rep.best_f1 - 0.01]
        assert abs(rep.plateau[0] - min(ok)) <= 0.001
        assert abs(rep.plateau[1] - max(ok)) <= 0.001


def test_determinism_across_workers(record_property, tmp_path):
    criterion(record_property, "determinism: byte-identical predictions for 1 and 4 workers")
    with budget(180.0):
        outputs = []
        for workers in (1, 4):
            roi, forest, report, dets = _fit_and_detect(workers)
            io.write_json(tmp_path / f"forest_{workers}.json", forest.to_dict())
            io.write_detections(tmp_path / f"pred_{workers}.json", roi.ref.id, report.best_threshold, dets)
            outputs.append(((tmp_path / f"forest_{workers}.json").read_bytes(),
                            (tmp_path / f"pred_{workers}.json").read_bytes()))
    assert outputs[0] == outputs[1]
