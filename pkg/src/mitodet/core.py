"""Geometric and raster value types shared by the pipeline.

Coordinates follow raster indexing: ``x`` is the column, ``y`` the row,
origin at the top-left, pixel centres at integer coordinates.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class Label(str, enum.Enum):
    MITOSIS = "mitosis"
    HARD_NEGATIVE = "hard_negative"
    ATYPICAL = "atypical"
    NORMAL = "normal"


class Stage(str, enum.Enum):
    SEGMENTATION = "segmentation"
    VERIFIED = "verified"


@dataclass(frozen=True)
class ImageRef:
    id: str
    width: int
    height: int
    mpp: Optional[float] = None
    group: Optional[str] = None

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image {self.id!r} has non-positive size {self.width}x{self.height}")
        if self.mpp is not None and not self.mpp > 0:
            raise ValueError(f"mpp must be > 0, got {self.mpp}")

    def contains(self, p: "Point") -> bool:
        return 0 <= p.x < self.width and 0 <= p.y < self.height


@dataclass(frozen=True, order=True)
class Point:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite point ({self.x}, {self.y})")

    def rounded(self) -> tuple[int, int]:
        return int(round(self.x)), int(round(self.y))


def distance(a: Point, b: Point) -> float:
    """Euclidean distance in pixels."""
    return math.hypot(a.x - b.x, a.y - b.y)


@dataclass(frozen=True)
class Annotation:
    point: Point
    label: Label
    image: str

    def __post_init__(self):
        # accept plain strings from file readers
        object.__setattr__(self, "label", Label(self.label))


def _check_score(score: float) -> None:
    if not 0.0 <= score <= 1.0:
        raise ValueError(f"score {score} outside [0, 1]")


@dataclass(frozen=True)
class Detection:
    point: Point
    score: float
    stage: Stage
    image: str
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        _check_score(self.score)
        object.__setattr__(self, "stage", Stage(self.stage))


def detection_sort_key(d: Detection):
    """Score descending, then (y, x) ascending."""
    return (-d.score, d.point.y, d.point.x)


@dataclass(frozen=True, eq=False)
class ProbabilityMap:
    """A 2-D grid of probabilities placed at ``origin`` in some image frame."""

    values: np.ndarray
    origin: Point = Point(0.0, 0.0)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"probability map must be 2-D, got shape {v.shape}")
        if v.size and (not np.isfinite(v).all() or v.min() < 0.0 or v.max() > 1.0):
            raise ValueError("probability map values must lie in [0, 1]")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other):
        if not isinstance(other, ProbabilityMap):
            return NotImplemented
        return self.origin == other.origin and np.array_equal(self.values, other.values)


def check_raster(pixels) -> np.ndarray:
    """Validate an RGB raster and return it as a (H, W, 3) uint8 array."""
    a = np.asarray(pixels)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"raster must have shape (H, W, 3), got {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError("raster is empty")
    if a.dtype != np.uint8:
        if np.issubdtype(a.dtype, np.floating) and not np.isfinite(a).all():
            raise ValueError("raster contains non-finite values")
        if a.min() < 0 or a.max() > 255:
            raise ValueError("raster channel values must lie in [0, 255]")
        a = a.astype(np.uint8)
    return a
