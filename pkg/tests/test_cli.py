import json
from pathlib import Path

import numpy as np
import pytest

from mitodet import io
from mitodet.cli import main
from mitodet.config import load_config, parse_override
from mitodet.core import Annotation, Detection, ImageRef, Label, Point, Stage
from mitodet.ensemble import StumpForest, ThresholdReport
from mitodet.synthetic import make_world

CONFIG = """
workers = 1

[track1]
segmenter = "seg"
classifiers = ["effb3", "effb5", "effv2s"]
forest = "forest.json"

[track2]
classifiers = ["a", "b", "c"]
threshold = 0.5

[augment]
brightness = [-0.05, 0.05]

[[backends]]
name = "seg"
kind = "segmenter"
backend = "oracle-segmenter"
path = "gt"
input_size = 512
[backends.options]
radius = 45

[[backends]]
name = "effb3"
kind = "classifier"
backend = "oracle-classifier"
path = "gt"
[backends.options]
sharpness = 0.3

[[backends]]
name = "effb5"
kind = "classifier"
backend = "oracle-classifier"
path = "gt"

[[backends]]
name = "effv2s"
kind = "classifier"
backend = "oracle-classifier"
path = "gt"
[backends.options]
sharpness = 0.8

[[backends]]
name = "a"
kind = "classifier"
backend = "constant"
input_size = 128
[backends.options]
value = 0.2

[[backends]]
name = "b"
kind = "classifier"
backend = "constant"
input_size = 128
[backends.options]
value = 0.6

[[backends]]
name = "c"
kind = "classifier"
backend = "constant"
input_size = 128
[backends.options]
value = 1.0
"""


def write_world(root: Path, image_id, seed, group, sub="images", size=768):
    w = make_world(image_id, size, size, n_mitoses=4, n_mimickers=4, seed=seed, group=group)
    io.write_png(root / sub / f"{image_id}.png", w.image)
    io.write_annotations(root / "gt" / f"{image_id}.json", w.ref, w.annotations)
    return w


@pytest.fixture(scope="module")
def tree(tmp_path_factory):
    root = tmp_path_factory.mktemp("world")
    (root / "config.toml").write_text(CONFIG)
    worlds = [write_world(root, "roi1", 1, "t1"), write_world(root, "roi2", 2, "t2")]
    # training and validation dirs hold images and annotations side by side
    for name, seed in (("train", 3), ("val", 4)):
        w = make_world(f"{name}0", 768, 768, n_mitoses=4, n_mimickers=4, seed=seed)
        io.write_png(root / name / f"{w.ref.id}.png", w.image)
        io.write_annotations(root / name / f"{w.ref.id}.json", w.ref, w.annotations)
        io.write_annotations(root / "gt" / f"{w.ref.id}.json", w.ref, w.annotations)
    return root, worlds


def run(*argv):
    return main([str(a) for a in argv])


def test_full_cli_flow(tree, capsys):
    root, worlds = tree
    assert run("fit-ensemble", "--config", root / "config.toml", "--train", root / "train",
               "--val", root / "val", "--out", root / "forest.json") == 0
    forest = StumpForest.from_dict(io.read_json(root / "forest.json"))
    report = ThresholdReport.from_dict(io.read_json(root / "forest_threshold.json"))
    assert report.best_f1 == 1.0 and forest.meta["threshold"] == report.best_threshold

    assert run("detect", "--config", root / "config.toml", "--images", root / "images",
               "--out", root / "pred") == 0
    for w in worlds:
        image_id, thr, dets = io.read_detections(root / "pred" / f"{w.ref.id}.json")
        assert len(dets) == len(w.mitoses)
        assert thr == report.best_threshold

    gt_eval = root / "gt_eval"
    for w in worlds:
        io.write_annotations(gt_eval / f"{w.ref.id}.json", w.ref, w.annotations)
    capsys.readouterr()
    assert run("evaluate", "--pred", root / "pred", "--gt", gt_eval, "--out", root / "report.json") == 0
    rep = io.read_json(root / "report.json")
    assert rep["overall"]["f1"] == 1.0
    assert set(rep["per_group"]) == {"t1", "t2"}
    assert "overall" in capsys.readouterr().out

    assert run("detect", "--config", root / "config.toml", "--images", root / "images",
               "--out", root / "pred0", "--threshold", "0") == 0
    assert run("sweep", "--pred", root / "pred0", "--gt", gt_eval, "--out", root / "sweep.json") == 0
    sw = io.read_json(root / "sweep.json")
    assert sw["best_f1"] == 1.0 and len(sw["curve"]["f1"]) == 1001


def test_evaluate_identical_predictions(tmp_path):
    ref = ImageRef("x", 100, 100, group="g")
    anns = [Annotation(Point(10, 10), Label.MITOSIS, "x"), Annotation(Point(60, 70), Label.MITOSIS, "x")]
    io.write_annotations(tmp_path / "gt" / "x.json", ref, anns)
    dets = [Detection(a.point, 0.9, Stage.VERIFIED, "x") for a in anns]
    io.write_detections(tmp_path / "pred" / "x.json", "x", 0.5, dets)
    assert run("evaluate", "--pred", tmp_path / "pred", "--gt", tmp_path / "gt", "--out", tmp_path / "r.json") == 0
    assert io.read_json(tmp_path / "r.json")["overall"]["f1"] == 1.0


def test_sweep_separable_plateau(tmp_path):
    ref = ImageRef("x", 200, 200)
    io.write_annotations(tmp_path / "gt" / "x.json", ref, [Annotation(Point(50, 50), Label.MITOSIS, "x")])
    dets = [Detection(Point(50, 50), 0.9, Stage.VERIFIED, "x"), Detection(Point(150, 150), 0.1, Stage.VERIFIED, "x")]
    io.write_detections(tmp_path / "pred" / "x.json", "x", 0.0, dets)
    assert run("sweep", "--pred", tmp_path / "pred", "--gt", tmp_path / "gt", "--out", tmp_path / "s.json") == 0
    sw = io.read_json(tmp_path / "s.json")
    # brute-force grid: F1 = 1 exactly for thresholds in (0.1, 0.9]
    ok = [i / 1000 for i in range(1001) if 0.1 < i / 1000 <= 0.9]
    assert sw["plateau"] == [min(ok), max(ok)]


def test_classify_command(tree, tmp_path):
    root, _ = tree
    rng = np.random.default_rng(0)
    for i in range(3):
        io.write_png(tmp_path / "patches" / f"p{i}.png", rng.integers(0, 256, (100, 100, 3), dtype=np.uint8))
    assert run("classify", "--config", root / "config.toml", "--patches", tmp_path / "patches",
               "--out", tmp_path / "cls.json") == 0
    _, thr, rows = io.parse_classification(io.read_json(tmp_path / "cls.json"))
    assert thr == 0.5
    assert [r[0] for r in rows] == ["p0", "p1", "p2"]
    assert all(r[1] == pytest.approx(0.6) and r[2] == "atypical" for r in rows)


def test_build_dataset(tree, tmp_path):
    root, worlds = tree
    w = worlds[0]
    stage1 = [Detection(w.mitoses[0].point, 0.9, Stage.SEGMENTATION, w.ref.id),
              Detection(Point(5, 5), 0.4, Stage.SEGMENTATION, w.ref.id)]
    io.write_detections(tmp_path / "cands" / f"{w.ref.id}.json", w.ref.id, 0.5, stage1)
    gt_dir = tmp_path / "gt"
    io.write_annotations(gt_dir / f"{w.ref.id}.json", w.ref, w.annotations)
    assert run("build-dataset", "--annotations", gt_dir, "--images", root / "images", "--out",
               tmp_path / "ds", "--candidates", tmp_path / "cands") == 0
    m = io.read_json(tmp_path / "ds" / "manifest.json")
    assert m["counts"] == {"gt": 4, "tp": 1, "fn": 3, "fp": 1}
    assert len([e for e in m["entries"] if e["label"] == "pos"]) == 4 + 1 + 3
    assert [e["provenance"] for e in m["entries"] if e["label"] == "neg"] == ["fp"]
    patch = io.read_raster(tmp_path / "ds" / m["entries"][0]["patch_path"])
    assert patch.shape == (140, 140, 3)
    mask = np.asarray(__import__("PIL.Image").Image.open(tmp_path / "ds" / "masks" / f"{w.ref.id}.png"))
    assert set(np.unique(mask)) == {0, 1}


def test_bad_input_exit_code(tmp_path, capsys):
    (tmp_path / "gt").mkdir()
    (tmp_path / "gt" / "x.json").write_text("{not json")
    (tmp_path / "pred").mkdir()
    assert run("evaluate", "--pred", tmp_path / "pred", "--gt", tmp_path / "gt", "--out", tmp_path / "r.json") == 2
    err = json.loads(capsys.readouterr().err)
    assert err["exit_code"] == 2 and "invalid JSON" in err["message"]
    assert not (tmp_path / "r.json").exists()


def test_unknown_schema_version_rejected(tmp_path):
    ref = ImageRef("x", 10, 10)
    d = io.annotations_to_dict(ref, [])
    d["schema_version"] = "9.0"
    (tmp_path / "x.json").write_text(json.dumps(d))
    with pytest.raises(io.FormatError):
        io.read_annotations(tmp_path / "x.json")


def test_annotation_out_of_bounds_rejected():
    with pytest.raises(io.FormatError):
        io.parse_annotations({"image_id": "x", "width": 10, "height": 10,
                              "points": [{"x": 10, "y": 1, "label": "mitosis"}]})
    with pytest.raises(io.FormatError):
        io.parse_annotations({"image_id": "x", "width": 10, "height": 10,
                              "points": [{"x": 1, "y": 1, "label": "blob"}]})


def test_round_trips(tmp_path):
    ref = ImageRef("r", 50, 40, mpp=0.25, group="g1")
    anns = [Annotation(Point(1.5, 2.25), Label.ATYPICAL, "r"), Annotation(Point(49, 39), Label.NORMAL, "r")]
    io.write_annotations(tmp_path / "a.json", ref, anns)
    assert io.read_annotations(tmp_path / "a.json") == (ref, anns)
    dets = [Detection(Point(3.125, 4.0), 0.75, Stage.VERIFIED, "r"), Detection(Point(1, 1), 0.5, Stage.VERIFIED, "r")]
    io.write_detections(tmp_path / "d.json", "r", 0.5, dets)
    image_id, thr, back = io.read_detections(tmp_path / "d.json")
    assert (image_id, thr) == ("r", 0.5)
    assert [(d.point, d.score) for d in back] == [(d.point, d.score) for d in dets]
    img = np.random.default_rng(0).integers(0, 256, (7, 9, 3), dtype=np.uint8)
    io.write_png(tmp_path / "i.png", img)
    assert np.array_equal(io.read_raster(tmp_path / "i.png"), img)


def test_unsorted_predictions_rejected():
    with pytest.raises(io.FormatError):
        io.parse_detections({"image_id": "x", "detections": [{"x": 1, "y": 1, "score": 0.1},
                                                             {"x": 2, "y": 2, "score": 0.9}]})


def test_config_overrides(tree):
    root, _ = tree
    cfg = load_config(root / "config.toml", ["track1.seg_threshold=0.4", "track2.threshold=0.7"])
    assert cfg.track1.seg_threshold == 0.4 and cfg.track2.threshold == 0.7
    assert cfg.augment.brightness == (-0.05, 0.05)
    assert Path(cfg.backends["seg"].path) == (root / "gt").resolve()
    assert parse_override("track1.merge=max") == ("track1.merge", "max")
    with pytest.raises(ValueError):
        load_config(root / "config.toml", ["track1.bogus=1"])


def test_atomic_write_leaves_no_partial(tmp_path, monkeypatch):
    target = tmp_path / "out.json"
    io.write_json(target, {"a": 1})

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(io.os, "replace", boom)
    with pytest.raises(OSError):
        io.write_json(target, {"a": 2})
    assert json.loads(target.read_text()) == {"a": 1}
    assert [p.name for p in tmp_path.iterdir()] == ["out.json"]
