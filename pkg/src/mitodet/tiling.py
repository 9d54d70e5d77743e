"""Sliding-window tile planning and stitching of per-tile probability maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Point, ProbabilityMap


@dataclass(frozen=True)
class TilePlan:
    width: int
    height: int
    window: int
    overlap: int
    origins: tuple[tuple[int, int], ...]

    @property
    def stride(self) -> int:
        return self.window - self.overlap

    def tile_size(self, origin: tuple[int, int]) -> tuple[int, int]:
        """(width, height) of the tile at ``origin``, clipped to the image."""
        x, y = origin
        return min(self.window, self.width - x), min(self.window, self.height - y)

    def __iter__(self):
        return iter(self.origins)

    def __len__(self):
        return len(self.origins)


def _axis_origins(extent: int, window: int, stride: int) -> list[int]:
    last = max(0, extent - window)
    out = list(range(0, last, stride))
    out.append(last)
    return out


def plan_tiles(width: int, height: int, window: int = 512, overlap: int = 256) -> TilePlan:
    """Grid of tile origins with stride ``window - overlap``.

    The final origin on each axis is clamped so the last tile ends at the
    image edge. Axes shorter than ``window`` get a single clipped tile.
    """
    if width < 1 or height < 1:
        raise ValueError(f"image size must be positive, got {width}x{height}")
    if window < 1:
        raise ValueError(f"window must be positive, got {window}")
    if not 0 <= overlap < window:
        raise ValueError(f"overlap must satisfy 0 <= overlap < window, got {overlap} vs {window}")
    stride = window - overlap
    xs = _axis_origins(width, window, stride)
    ys = _axis_origins(height, window, stride)
    origins = tuple((x, y) for y in ys for x in xs)
    return TilePlan(width, height, window, overlap, origins)


def stitch(tile_maps, plan: TilePlan, mode: str = "mean") -> ProbabilityMap:
    """Merge tile maps into one image-frame map.

    ``tile_maps`` is either a sequence aligned with ``plan.origins`` or a
    mapping keyed by origin. Overlaps are merged by per-pixel mean (sums and
    counts accumulated, divided once) or by max.
    """
    if isinstance(tile_maps, dict):
        if set(tile_maps) != set(plan.origins):
            raise ValueError("tile map keys do not match the plan origins")
        items = [(o, tile_maps[o]) for o in plan.origins]
    else:
        tile_maps = list(tile_maps)
        if len(tile_maps) != len(plan.origins):
            raise ValueError(f"got {len(tile_maps)} tile maps for {len(plan.origins)} tiles")
        items = list(zip(plan.origins, tile_maps))
    if mode not in ("mean", "max"):
        raise ValueError(f"unknown merge mode {mode!r}")

    acc = np.zeros((plan.height, plan.width), dtype=np.float64)
    count = np.zeros((plan.height, plan.width), dtype=np.int32)
    lo = np.full((plan.height, plan.width), np.inf)
    hi = np.full((plan.height, plan.width), -np.inf)
    for (x, y), m in items:
        values = m.values if isinstance(m, ProbabilityMap) else np.asarray(m, dtype=np.float64)
        w, h = plan.tile_size((x, y))
        if values.shape != (h, w):
            raise ValueError(f"tile at {(x, y)} has shape {values.shape}, expected {(h, w)}")
        if mode == "mean":
            acc[y:y + h, x:x + w] += values
        else:
            np.maximum(acc[y:y + h, x:x + w], values, out=acc[y:y + h, x:x + w])
        count[y:y + h, x:x + w] += 1
        np.minimum(lo[y:y + h, x:x + w], values, out=lo[y:y + h, x:x + w])
        np.maximum(hi[y:y + h, x:x + w], values, out=hi[y:y + h, x:x + w])
    if (count == 0).any():
        raise ValueError("plan leaves pixels uncovered")
    if mode == "mean":
        acc /= count
        # rounding in sum/count can step one ulp outside the contributing range
        np.clip(acc, lo, hi, out=acc)
    return ProbabilityMap(acc, Point(0.0, 0.0))
