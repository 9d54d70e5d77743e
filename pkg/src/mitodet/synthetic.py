"""Synthetic ROIs with planted mitoses and mimickers, for oracle-driven
end-to-end runs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Annotation, ImageRef, Label, Point


@dataclass
class World:
    image: np.ndarray
    ref: ImageRef
    annotations: list[Annotation]

    @property
    def mitoses(self) -> list[Annotation]:
        return [a for a in self.annotations if a.label == Label.MITOSIS]


def plant_points(width: int, height: int, n: int, min_sep: float, margin: float,
                 rng: np.random.Generator, max_tries: int = 200_000) -> np.ndarray:
    """Rejection-sample ``n`` points at least ``min_sep`` apart and ``margin`` from the border."""
    pts = np.empty((0, 2))
    tries = 0
    while len(pts) < n:
        tries += 1
        if tries > max_tries:
            raise RuntimeError(f"could only place {len(pts)} of {n} points")
        p = rng.uniform((margin, margin), (width - 1 - margin, height - 1 - margin))
        if len(pts) and np.hypot(*(pts - p).T).min() < min_sep:
            continue
        pts = np.vstack([pts, p])
    return pts


def make_world(image_id: str = "synthetic", width: int = 2048, height: int = 2048,
               n_mitoses: int = 50, n_mimickers: int = 50, min_sep: float = 120.0,
               margin: float = 50.0, blob_radius: int = 12, seed: int = 0,
               group: str = "synthetic", integer_points: bool = False) -> World:
    rng = np.random.default_rng(seed)
    pts = plant_points(width, height, n_mitoses + n_mimickers, min_sep, margin, rng)
    if integer_points:
        pts = np.round(pts)
    labels = [Label.MITOSIS] * n_mitoses + [Label.HARD_NEGATIVE] * n_mimickers
    anns = [Annotation(Point(float(x), float(y)), lab, image_id) for (x, y), lab in zip(pts, labels)]

    img = np.empty((height, width, 3), dtype=np.float64)
    img[:] = (232.0, 190.0, 215.0)  # eosin-ish background
    img += rng.normal(0.0, 6.0, img.shape)
    ys, xs = np.ogrid[:height, :width]
    for a in anns:
        disk = (xs - a.point.x) ** 2 + (ys - a.point.y) ** 2 <= blob_radius ** 2
        img[disk] = (70.0, 40.0, 110.0) if a.label == Label.MITOSIS else (110.0, 70.0, 120.0)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return World(img, ImageRef(image_id, width, height, 0.25, group), anns)
