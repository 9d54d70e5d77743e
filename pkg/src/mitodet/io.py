"""File formats: annotation and prediction JSON, forest and report JSON,
raster images, and atomic writes."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .core import Annotation, Detection, ImageRef, Label, Point, Stage, check_raster

SCHEMA_VERSION = "1.0"
IMAGE_SUFFIXES = (".png", ".tif", ".tiff")


class FormatError(ValueError):
    """Malformed or unsupported input file."""


def check_version(d: dict, what: str) -> None:
    v = d.get("schema_version")
    if v is None:
        return  # hand-written inputs may omit it
    if str(v).split(".")[0] != SCHEMA_VERSION.split(".")[0]:
        raise FormatError(f"{what}: unsupported schema version {v!r}")


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"


def write_json(path, obj) -> None:
    atomic_write_bytes(path, dumps(obj).encode())


def read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e})") from None


# -- annotations ------------------------------------------------------------

def annotations_to_dict(ref: ImageRef, annotations) -> dict:
    d = {"schema_version": SCHEMA_VERSION, "image_id": ref.id, "width": ref.width, "height": ref.height}
    if ref.mpp is not None:
        d["mpp"] = ref.mpp
    if ref.group is not None:
        d["group"] = ref.group
    d["points"] = [{"x": a.point.x, "y": a.point.y, "label": a.label.value} for a in annotations]
    return d


def parse_annotations(d: dict, source: str = "annotations") -> tuple[ImageRef, list[Annotation]]:
    check_version(d, source)
    try:
        ref = ImageRef(str(d["image_id"]), int(d["width"]), int(d["height"]),
                       d.get("mpp"), d.get("group"))
        out = []
        for p in d["points"]:
            label = Label(p["label"])
            pt = Point(float(p["x"]), float(p["y"]))
            if not ref.contains(pt):
                raise FormatError(f"{source}: point ({pt.x}, {pt.y}) outside {ref.width}x{ref.height}")
            out.append(Annotation(pt, label, ref.id))
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, FormatError):
            raise
        raise FormatError(f"{source}: {e!r}") from None
    return ref, out


def read_annotations(path) -> tuple[ImageRef, list[Annotation]]:
    return parse_annotations(read_json(path), str(path))


def write_annotations(path, ref: ImageRef, annotations) -> None:
    write_json(path, annotations_to_dict(ref, annotations))


def read_annotation_dir(path) -> dict[str, tuple[ImageRef, list[Annotation]]]:
    out = {}
    for f in sorted(Path(path).glob("*.json")):
        ref, anns = read_annotations(f)
        if ref.id in out:
            raise FormatError(f"{f}: duplicate image id {ref.id!r}")
        out[ref.id] = (ref, anns)
    return out


# -- predictions ------------------------------------------------------------

def detections_to_dict(image_id: str, threshold: Optional[float], dets, extra: Optional[dict] = None) -> dict:
    d = {"schema_version": SCHEMA_VERSION, "image_id": image_id, "threshold": threshold}
    if extra:
        d.update(extra)
    d["detections"] = [{"x": x.point.x, "y": x.point.y, "score": x.score} for x in dets]
    return d


def parse_detections(d: dict, source: str = "predictions") -> tuple[str, Optional[float], list[Detection]]:
    check_version(d, source)
    try:
        image_id = str(d["image_id"])
        dets = [Detection(Point(float(p["x"]), float(p["y"])), float(p["score"]), Stage.VERIFIED, image_id)
                for p in d["detections"]]
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{source}: {e!r}") from None
    scores = [x.score for x in dets]
    if scores != sorted(scores, reverse=True):
        raise FormatError(f"{source}: detections are not sorted by score descending")
    return image_id, d.get("threshold"), dets


def read_detections(path):
    return parse_detections(read_json(path), str(path))


def write_detections(path, image_id: str, threshold, dets, extra=None) -> None:
    write_json(path, detections_to_dict(image_id, threshold, dets, extra))


def read_prediction_dir(path) -> dict[str, list[Detection]]:
    out = {}
    for f in sorted(Path(path).glob("*.json")):
        image_id, _, dets = read_detections(f)
        out[image_id] = dets
    return out


def classification_to_dict(image_id: str, threshold: float, rows) -> dict:
    """``rows`` are (patch id, probability, label) triples."""
    rows = sorted(rows, key=lambda r: (-r[1], r[0]))
    return {"schema_version": SCHEMA_VERSION, "image_id": image_id, "threshold": threshold,
            "patches": [{"id": i, "probability": p, "label": lab} for i, p, lab in rows]}


def parse_classification(d: dict, source: str = "predictions"):
    check_version(d, source)
    try:
        rows = [(str(p["id"]), float(p["probability"]), str(p["label"])) for p in d["patches"]]
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{source}: {e!r}") from None
    if any(not 0 <= p <= 1 for _, p, _ in rows):
        raise FormatError(f"{source}: probability outside [0, 1]")
    return str(d.get("image_id", "")), d.get("threshold"), rows


# -- rasters ----------------------------------------------------------------

def read_raster(path) -> np.ndarray:
    with Image.open(path) as im:
        return check_raster(np.asarray(im.convert("RGB")))


def write_png(path, pixels: np.ndarray) -> None:
    import io as _io

    a = np.asarray(pixels)
    if a.ndim == 2:
        im = Image.fromarray(a.astype(np.uint8))
    else:
        im = Image.fromarray(check_raster(a))
    buf = _io.BytesIO()
    im.save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def find_image(images_dir, image_id: str) -> Path:
    for suffix in IMAGE_SUFFIXES:
        p = Path(images_dir) / f"{image_id}{suffix}"
        if p.exists():
            return p
    raise FileNotFoundError(f"no image for {image_id!r} in {images_dir}")


def list_images(images_dir) -> list[Path]:
    return sorted(p for p in Path(images_dir).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
