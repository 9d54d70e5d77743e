"""Point-detection scoring (matching, precision/recall/F1, grouped
breakdowns) and balanced accuracy for classification."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .core import Annotation, Detection


@dataclass(frozen=True)
class MatchCounts:
    tp: int
    fp: int
    fn: int
    tn: Optional[int] = None

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be >= 0, got {v}")

    def __add__(self, other: "MatchCounts") -> "MatchCounts":
        tn = None if self.tn is None and other.tn is None else (self.tn or 0) + (other.tn or 0)
        return MatchCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, tn)


@dataclass(frozen=True)
class MatchResult:
    counts: MatchCounts
    pairs: tuple[tuple[int, int], ...]  # (pred index, gt index) into the caller's lists
    unmatched_preds: tuple[int, ...]
    unmatched_gt: tuple[int, ...]


def _common_image(preds, gt) -> Optional[str]:
    ids = {p.image for p in preds} | {g.image for g in gt}
    if len(ids) > 1:
        raise ValueError(f"matching requires a single image, got {sorted(ids)}")
    return next(iter(ids), None)


def match_detections(preds: Sequence[Detection], gt: Sequence[Annotation],
                     radius: float = 30.0, optimal: bool = False) -> MatchResult:
    """Match predictions to ground-truth points within ``radius`` pixels.

    Greedy by default: predictions are visited by score descending (ties by
    y, then x) and each takes the nearest still-unmatched gt point within
    the radius. ``optimal=True`` instead maximises the number of pairs with
    a bipartite assignment, breaking ties by total distance.
    """
    if not radius > 0:
        raise ValueError(f"radius must be > 0, got {radius}")
    _common_image(preds, gt)
    if optimal:
        pairs = _optimal_pairs(preds, gt, radius)
    else:
        pairs = _greedy_pairs(preds, gt, radius)
    matched_p = {p for p, _ in pairs}
    matched_g = {g for _, g in pairs}
    unmatched_p = tuple(i for i in range(len(preds)) if i not in matched_p)
    unmatched_g = tuple(j for j in range(len(gt)) if j not in matched_g)
    counts = MatchCounts(tp=len(pairs), fp=len(unmatched_p), fn=len(unmatched_g))
    return MatchResult(counts, tuple(sorted(pairs)), unmatched_p, unmatched_g)


def _greedy_pairs(preds, gt, radius):
    if not preds or not gt:
        return []
    gxy = np.array([(g.point.x, g.point.y) for g in gt], dtype=np.float64)
    pxy = np.array([(p.point.x, p.point.y) for p in preds], dtype=np.float64)
    score = np.array([p.score for p in preds])
    order = np.lexsort((pxy[:, 0], pxy[:, 1], -score))
    near = cKDTree(gxy).query_ball_point(pxy, r=radius)
    taken = bytearray(len(gt))
    pairs = []
    for i in order.tolist():
        cand = [j for j in near[i] if not taken[j]]
        if not cand:
            continue
        if len(cand) > 1:
            cand.sort()
            d = np.hypot(gxy[cand, 0] - pxy[i, 0], gxy[cand, 1] - pxy[i, 1])
            j = cand[int(np.argmin(d))]  # first minimum: lowest gt index on ties
        else:
            j = cand[0]
        taken[j] = 1
        pairs.append((i, j))
    return pairs


def _optimal_pairs(preds, gt, radius):
    if not preds or not gt:
        return []
    pxy = np.array([(p.point.x, p.point.y) for p in preds])
    gxy = np.array([(g.point.x, g.point.y) for g in gt])
    dist = np.hypot(pxy[:, None, 0] - gxy[None, :, 0], pxy[:, None, 1] - gxy[None, :, 1])
    # any valid pair must beat every combination of distances, so cardinality wins first
    big = radius * (len(preds) + len(gt) + 1) + 1.0
    cost = np.where(dist <= radius, dist, big)
    rows, cols = linear_sum_assignment(cost)
    return [(int(r), int(c)) for r, c in zip(rows, cols) if dist[r, c] <= radius]


def prf1(c: MatchCounts) -> tuple[float, float, float]:
    """Precision, recall and F1 from counts.

    Precision is 0 when there are no predictions; F1 = 2tp / (2tp + fp + fn).
    """
    if c.tp + c.fp + c.fn == 0:
        raise ValueError("precision/recall/F1 undefined for all-zero counts")
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    f1 = 2 * c.tp / (2 * c.tp + c.fp + c.fn) if c.tp else 0.0
    return precision, recall, f1


def balanced_accuracy(tp: int, fn: int, tn: int, fp: int) -> float:
    if tp + fn == 0 or tn + fp == 0:
        raise ValueError("balanced accuracy needs at least one sample of each class")
    return (tp / (tp + fn) + tn / (tn + fp)) / 2


def classification_counts(labels: Sequence[int], predicted: Sequence[int]) -> MatchCounts:
    y = np.asarray(labels, dtype=bool)
    p = np.asarray(predicted, dtype=bool)
    if y.shape != p.shape:
        raise ValueError("labels and predictions differ in length")
    return MatchCounts(tp=int((y & p).sum()), fp=int((~y & p).sum()),
                       fn=int((y & ~p).sum()), tn=int((~y & ~p).sum()))


@dataclass
class GroupMetrics:
    counts: MatchCounts
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, counts: MatchCounts) -> "GroupMetrics":
        if counts.tp + counts.fp + counts.fn == 0:
            # nothing to find and nothing predicted
            return cls(counts, 0.0, 0.0, 0.0)
        return cls(counts, *prf1(counts))

    def to_dict(self) -> dict:
        return {"tp": self.counts.tp, "fp": self.counts.fp, "fn": self.counts.fn,
                "precision": self.precision, "recall": self.recall, "f1": self.f1}


@dataclass
class EvalReport:
    overall: GroupMetrics
    per_group: dict[str, GroupMetrics]
    macro: dict[str, float]
    threshold: Optional[float] = None
    radius: Optional[float] = None
    matcher: str = "greedy"
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "overall": self.overall.to_dict(),
            "per_group": {k: v.to_dict() for k, v in sorted(self.per_group.items())},
            "macro": self.macro,
            "threshold": self.threshold,
            "radius": self.radius,
            "matcher": self.matcher,
            "notes": list(self.notes),
        }

    def table(self) -> str:
        rows = [("group", "tp", "fp", "fn", "precision", "recall", "f1")]
        for name, m in sorted(self.per_group.items()):
            rows.append(_row(name, m))
        rows.append(_row("overall", self.overall))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows)


def _row(name, m: GroupMetrics):
    c = m.counts
    return (name, str(c.tp), str(c.fp), str(c.fn),
            f"{m.precision:.4f}", f"{m.recall:.4f}", f"{m.f1:.4f}")


def grouped_report(per_image: dict[str, MatchCounts], groups: dict[str, str],
                   threshold: Optional[float] = None, radius: Optional[float] = None,
                   matcher: str = "greedy") -> EvalReport:
    """Pool counts per group and overall (micro averaging).

    Macro means of the per-group metrics are reported alongside.
    """
    missing = sorted(set(per_image) - set(groups))
    if missing:
        raise ValueError(f"images without a group assignment: {missing}")
    pooled: dict[str, MatchCounts] = {}
    for image_id, counts in sorted(per_image.items()):
        g = groups[image_id]
        pooled[g] = pooled[g] + counts if g in pooled else counts
    per_group = {g: GroupMetrics.from_counts(c) for g, c in pooled.items()}
    total = MatchCounts(0, 0, 0)
    for c in pooled.values():
        total = total + c
    overall = GroupMetrics.from_counts(total)
    if per_group:
        macro = {k: float(np.mean([getattr(m, k) for m in per_group.values()]))
                 for k in ("precision", "recall", "f1")}
    else:
        macro = {"precision": 0.0, "recall": 0.0, "f1": 0.0}
    return EvalReport(overall, per_group, macro, threshold, radius, matcher,
                      notes=[f"{matcher} matching within {radius} px; overall is pooled over groups"
                             if radius is not None else "overall is pooled over groups"])
