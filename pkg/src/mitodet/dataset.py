"""Training data construction: segmentation masks, candidate patches and
labelled positive/negative patch sets."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .core import Annotation, Detection, Label, Point, check_raster
from .evaluation import match_detections

log = logging.getLogger(__name__)

BORDER_POLICIES = ("mirror", "zero")


@dataclass(frozen=True)
class MaskSpec:
    radius: int = 45

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError(f"mask radius must be >= 1, got {self.radius}")


@dataclass(frozen=True)
class PatchSpec:
    size: int = 140
    border_policy: str = "mirror"

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"patch size must be >= 1, got {self.size}")
        if self.border_policy not in BORDER_POLICIES:
            raise ValueError(f"border policy must be one of {BORDER_POLICIES}")


def synthesize_mask(annotations: Sequence[Annotation], width: int, height: int,
                    spec: MaskSpec = MaskSpec(), include_hard_negatives: bool = True) -> np.ndarray:
    """Binary (height, width) uint8 mask with a filled disk per included point.

    Pixel (px, py) is foreground iff (px - x)^2 + (py - y)^2 <= radius^2 for
    some included annotation. With ``include_hard_negatives`` mimickers are
    drawn too, which is how the segmentation training targets are built.
    """
    labels = {Label.MITOSIS, Label.HARD_NEGATIVE} if include_hard_negatives else {Label.MITOSIS}
    mask = np.zeros((height, width), dtype=np.uint8)
    r = spec.radius
    r2 = r * r
    for a in annotations:
        x, y = a.point.x, a.point.y
        if not (0 <= x < width and 0 <= y < height):
            raise ValueError(f"annotation at ({x}, {y}) lies outside the {width}x{height} image")
        if a.label not in labels:
            continue
        x0, x1 = max(0, int(np.floor(x - r))), min(width - 1, int(np.ceil(x + r)))
        y0, y1 = max(0, int(np.floor(y - r))), min(height - 1, int(np.ceil(y + r)))
        ys, xs = np.ogrid[y0:y1 + 1, x0:x1 + 1]
        disk = (xs - x) ** 2 + (ys - y) ** 2 <= r2
        mask[y0:y1 + 1, x0:x1 + 1] |= disk.astype(np.uint8)
    return mask


def extract_patch(image: np.ndarray, center: Point, spec: PatchSpec = PatchSpec()) -> np.ndarray:
    """Square crop of ``spec.size`` whose centre pixel is ``round(center)``.

    For even sizes the centre pixel is the one at index size // 2. Regions
    outside the image are mirror-reflected or zero-filled.
    """
    image = check_raster(image)
    h, w = image.shape[:2]
    if not (0 <= center.x < w and 0 <= center.y < h):
        raise ValueError(f"patch centre ({center.x}, {center.y}) outside the {w}x{h} image")
    cx, cy = center.rounded()
    # round() can push x = w - 0.4 up to w
    cx, cy = min(cx, w - 1), min(cy, h - 1)
    half = spec.size // 2
    rows = np.arange(cy - half, cy - half + spec.size)
    cols = np.arange(cx - half, cx - half + spec.size)
    if spec.border_policy == "mirror":
        return image[np.ix_(_reflect(rows, h), _reflect(cols, w))]
    out = np.zeros((spec.size, spec.size, 3), dtype=np.uint8)
    rin = (rows >= 0) & (rows < h)
    cin = (cols >= 0) & (cols < w)
    out[np.ix_(rin, cin)] = image[np.ix_(rows[rin], cols[cin])]
    return out


def _reflect(idx: np.ndarray, n: int) -> np.ndarray:
    """Whole-sample-symmetric reflection (edge pixel not repeated) into [0, n)."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    m = np.mod(idx, period)
    return np.where(m < n, m, period - m)


class PatchRecord(NamedTuple):
    point: Point
    image: str
    provenance: str  # gt | tp | fn | fp
    score: Optional[float] = None
    patch_path: Optional[str] = None

    @property
    def label(self) -> str:
        return "neg" if self.provenance == "fp" else "pos"


@dataclass
class LabeledPatchSet:
    positives: list[PatchRecord] = field(default_factory=list)
    negatives: list[PatchRecord] = field(default_factory=list)
    counts: dict[str, int] = field(default_factory=lambda: {"gt": 0, "tp": 0, "fn": 0, "fp": 0})

    def check(self) -> None:
        c = self.counts
        if len(self.positives) != c["gt"] + c["tp"] + c["fn"]:
            raise AssertionError("positives do not equal gt + tp + fn")
        if len(self.negatives) != c["fp"]:
            raise AssertionError("negatives do not equal fp")

    def extend(self, other: "LabeledPatchSet") -> None:
        self.positives.extend(other.positives)
        self.negatives.extend(other.negatives)
        for k in self.counts:
            self.counts[k] += other.counts[k]


def positive_total(counts: dict[str, int]) -> int:
    return counts["gt"] + counts["tp"] + counts["fn"]


def label_candidates(gt: Sequence[Annotation], stage1: Sequence[Detection],
                     match_radius: float = 30.0) -> LabeledPatchSet:
    """Split stage-1 detections into classifier training positives/negatives.

    Positives are every ground-truth mitosis (provenance ``gt``), every
    detection matched to one (``tp``), and a second copy of every missed
    ground-truth point (``fn``), so missed mitoses are weighted up. Unmatched
    detections are the negatives (``fp``). Always fn = |gt| - tp.
    """
    ids = {a.image for a in gt} | {d.image for d in stage1}
    if len(ids) > 1:
        raise ValueError(f"label_candidates needs a single image, got {sorted(ids)}")
    gt = [a for a in gt if a.label == Label.MITOSIS]
    res = match_detections(stage1, gt, match_radius)
    out = LabeledPatchSet()
    out.positives = [PatchRecord(a.point, a.image, "gt") for a in gt]
    out.positives += [PatchRecord(stage1[i].point, stage1[i].image, "tp", stage1[i].score)
                      for i, _ in res.pairs]
    out.positives += [PatchRecord(gt[j].point, gt[j].image, "fn") for j in res.unmatched_gt]
    out.negatives = [PatchRecord(stage1[i].point, stage1[i].image, "fp", stage1[i].score)
                     for i in res.unmatched_preds]
    out.counts = {"gt": len(gt), "tp": res.counts.tp, "fn": res.counts.fn, "fp": res.counts.fp}
    out.check()
    return out


def sample_training_crops(image: np.ndarray, mask: np.ndarray, crop: int = 512, n: int = 1,
                          p_foreground: float = 0.5, seed: int = 0):
    """Draw ``n`` (image crop, mask crop) pairs with foreground oversampling.

    Each draw, with probability ``p_foreground``, centres the crop on a
    uniformly chosen foreground pixel (clamped into bounds); otherwise the
    crop origin is uniform. Masks without foreground fall back to uniform.
    """
    image = check_raster(image)
    h, w = image.shape[:2]
    if mask.shape != (h, w):
        raise ValueError(f"mask shape {mask.shape} does not match image {(h, w)}")
    if crop < 1 or crop > min(h, w):
        raise ValueError(f"crop {crop} does not fit the {w}x{h} image")
    if not 0.0 <= p_foreground <= 1.0:
        raise ValueError(f"p_foreground must lie in [0, 1], got {p_foreground}")
    rng = np.random.default_rng(seed)
    fg = np.flatnonzero(mask)
    if p_foreground > 0 and fg.size == 0:
        log.warning("mask has no foreground; sampling crops uniformly")
    out = []
    for _ in range(n):
        if fg.size and rng.random() < p_foreground:
            k = fg[rng.integers(fg.size)]
            fy, fx = divmod(int(k), w)
            x0 = min(max(fx - crop // 2, 0), w - crop)
            y0 = min(max(fy - crop // 2, 0), h - crop)
        else:
            x0 = int(rng.integers(0, w - crop + 1))
            y0 = int(rng.integers(0, h - crop + 1))
        out.append((image[y0:y0 + crop, x0:x0 + crop], mask[y0:y0 + crop, x0:x0 + crop]))
    return out
