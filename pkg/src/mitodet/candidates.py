"""Stage-1 candidate extraction: threshold a probability map, label its
connected components and reduce each to a scored centroid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import Detection, Point, ProbabilityMap, Stage, detection_sort_key


@dataclass(frozen=True, eq=False)
class Component:
    pixels: np.ndarray  # (n, 2) array of (x, y)
    centroid: Point
    peak_prob: float

    @property
    def area(self) -> int:
        return len(self.pixels)

    def bbox(self) -> tuple[int, int, int, int]:
        """(x_min, y_min, x_max, y_max), inclusive."""
        x, y = self.pixels[:, 0], self.pixels[:, 1]
        return int(x.min()), int(y.min()), int(x.max()), int(y.max())


def binarize(pmap: ProbabilityMap, t: float = 0.5) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {t}")
    return (pmap.values >= t).astype(np.uint8)


_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


def extract_components(mask: np.ndarray, pmap: ProbabilityMap, connectivity: int = 8,
                       min_area: int = 10) -> list[Component]:
    """Connected foreground regions of ``mask`` with at least ``min_area`` pixels.

    Sorted by peak probability descending, then centroid (y, x) ascending.
    Centroids are in the map's frame shifted by its origin.
    """
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    if mask.shape != pmap.values.shape:
        raise ValueError(f"mask shape {mask.shape} differs from map shape {pmap.values.shape}")
    labels, n = ndimage.label(mask, structure=_STRUCTURES[connectivity])
    if n == 0:
        return []
    out = []
    for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        ys, xs = np.nonzero(labels[sl] == idx)
        if len(xs) < min_area:
            continue
        ys = ys + sl[0].start
        xs = xs + sl[1].start
        peak = float(pmap.values[ys, xs].max())
        centroid = Point(float(xs.mean()) + pmap.origin.x, float(ys.mean()) + pmap.origin.y)
        pixels = np.stack([xs, ys], axis=1)
        out.append(Component(pixels, centroid, peak))
    out.sort(key=lambda c: (-c.peak_prob, c.centroid.y, c.centroid.x))
    return out


def components_to_detections(components, image_id: str) -> list[Detection]:
    return [Detection(c.centroid, c.peak_prob, Stage.SEGMENTATION, image_id,
                      meta={"area": c.area}) for c in components]


def deduplicate(dets, radius: float = 30.0) -> list[Detection]:
    """Greedy suppression: by score descending (ties by y, x), keep a
    detection only if no kept detection lies within ``radius``."""
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    kept: list[Detection] = []
    kept_xy = np.empty((0, 2))
    for d in sorted(dets, key=detection_sort_key):
        if len(kept):
            dist = np.hypot(kept_xy[:, 0] - d.point.x, kept_xy[:, 1] - d.point.y)
            if (dist <= radius).any():
                continue
        kept.append(d)
        kept_xy = np.vstack([kept_xy, [d.point.x, d.point.y]])
    return kept
