"""Ensemble stage: TTA x model feature vectors, a bagged forest of depth-1
decision stumps, equal-weight averaging, and decision-threshold sweeps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import Annotation, Detection
from .evaluation import match_detections

FOREST_SCHEMA = "1.0"


@dataclass(frozen=True)
class FeatureVector:
    """Model-major, TTA-minor: [m0t0, m0t1, ..., m1t0, ...]."""

    values: tuple[float, ...]
    layout: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        n_models, n_tta = self.layout
        if len(self.values) != n_models * n_tta:
            raise ValueError(f"{len(self.values)} values do not fit layout {self.layout}")
        if any(not 0.0 <= v <= 1.0 for v in self.values):
            raise ValueError("feature values must lie in [0, 1]")

    def __len__(self):
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values)


def assemble_features(probs: dict, layout: tuple[int, int]) -> FeatureVector:
    """Order ``{(model, tta): p}`` into a feature vector; nothing is imputed."""
    n_models, n_tta = layout
    expected = {(m, t) for m in range(n_models) for t in range(n_tta)}
    keys = list(probs)
    if len(keys) != len(set(keys)):
        raise ValueError("duplicate (model, tta) keys")
    missing = sorted(expected - set(keys))
    extra = sorted(set(keys) - expected)
    if missing or extra:
        raise ValueError(f"feature keys do not match layout {layout}: missing {missing}, unexpected {extra}")
    return FeatureVector(tuple(probs[(m, t)] for m in range(n_models) for t in range(n_tta)), layout)


def average_probs(x) -> float:
    values = x.values if isinstance(x, FeatureVector) else tuple(x)
    if not values:
        raise ValueError("cannot average an empty vector")
    mean = math.fsum(values) / len(values)
    return min(max(mean, min(values)), max(values))


# -- stumps -----------------------------------------------------------------

@dataclass(frozen=True)
class Split:
    threshold: float
    left: float  # positive fraction for x <= threshold
    right: float
    impurity: float  # weighted Gini of the two sides
    valid: bool = True


def _gini_sides(pos_l, n_l, pos_r, n_r):
    n = n_l + n_r
    g = 0.0
    if n_l:
        g += 2.0 * pos_l * (n_l - pos_l) / n_l
    if n_r:
        g += 2.0 * pos_r * (n_r - pos_r) / n_r
    return g / n


def fit_stump(x, y, tol: float = 1e-12) -> Split:
    """Best single-threshold split of one feature by weighted Gini impurity.

    Candidate thresholds are midpoints between consecutive distinct sorted
    values; ties go to the smaller threshold. Single-class input, or a
    constant feature, gives a degenerate split whose leaves both hold the
    overall positive fraction.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.size == 0:
        raise ValueError("cannot fit a stump on no samples")
    if x.shape != y.shape:
        raise ValueError("feature values and labels differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    y = y.astype(np.int64)
    n, pos = x.size, int(y.sum())
    frac = pos / n
    parent = _gini_sides(pos, n, 0, 0)
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    cut = np.flatnonzero(xs[1:] > xs[:-1])  # split after position cut[i]
    if pos in (0, n) or cut.size == 0:
        return Split(float(xs[-1]), frac, frac, parent, valid=False)
    pos_l = np.cumsum(ys)[cut]
    n_l = cut + 1
    pos_r, n_r = pos - pos_l, n - n_l
    imp = (2.0 * pos_l * (n_l - pos_l) / n_l + 2.0 * pos_r * (n_r - pos_r) / n_r) / n
    best = int(np.flatnonzero(imp <= imp.min() + tol)[0])
    i = cut[best]
    thr = float((xs[i] + xs[i + 1]) / 2.0)
    return Split(thr, float(pos_l[best] / n_l[best]), float(pos_r[best] / n_r[best]), float(imp[best]))


@dataclass(frozen=True)
class Stump:
    feature: int
    threshold: float
    left: float
    right: float

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.where(X[:, self.feature] <= self.threshold, self.left, self.right)


def best_stump(X: np.ndarray, y: np.ndarray, features: Sequence[int], tol: float = 1e-12) -> Stump:
    """Lowest-impurity valid split over ``features`` (smaller index on ties);
    degenerate on the smallest candidate index if none can split."""
    splits = {f: fit_stump(X[:, f], y) for f in sorted(int(f) for f in features)}
    valid = {f: s for f, s in splits.items() if s.valid}
    if not valid:
        f = min(splits)
        s = splits[f]
        return Stump(f, s.threshold, s.left, s.right)
    lowest = min(s.impurity for s in valid.values())
    f = min(f for f, s in valid.items() if s.impurity <= lowest + tol)
    s = valid[f]
    return Stump(f, s.threshold, s.left, s.right)


# -- forest -----------------------------------------------------------------

@dataclass(frozen=True)
class ForestParams:
    n_estimators: int = 260
    max_depth: int = 1
    max_features: Optional[int] = None  # default floor(sqrt(d))
    seed: int = 0

    def __post_init__(self):
        if self.n_estimators < 1:
            raise ValueError("n_estimators must be >= 1")
        if self.max_depth != 1:
            raise ValueError("only depth-1 trees (stumps) are supported")


@dataclass
class StumpForest:
    trees: list[Stump]
    n_features: int
    n_estimators: int = 260
    max_depth: int = 1
    max_features: int = 3
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.trees) != self.n_estimators:
            raise ValueError(f"forest declares {self.n_estimators} trees but holds {len(self.trees)}")

    def predict_proba(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        total = np.zeros(X.shape[0])
        for t in self.trees:
            total += t.predict(X)
        return np.clip(total / len(self.trees), 0.0, 1.0)

    def to_dict(self) -> dict:
        return {
            "schema_version": FOREST_SCHEMA,
            "kind": "stump_forest",
            "n_estimators": self.n_estimators,
            "max_depth": self.max_depth,
            "max_features": self.max_features,
            "n_features": self.n_features,
            "seed": self.seed,
            "meta": self.meta,
            "trees": [{"feature": t.feature, "threshold": t.threshold, "left": t.left, "right": t.right}
                      for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StumpForest":
        major = str(d.get("schema_version", "")).split(".")[0]
        if major != FOREST_SCHEMA.split(".")[0]:
            raise ValueError(f"unsupported forest schema version {d.get('schema_version')!r}")
        if d.get("kind") != "stump_forest":
            raise ValueError(f"not a stump forest: kind={d.get('kind')!r}")
        trees = [Stump(int(t["feature"]), float(t["threshold"]), float(t["left"]), float(t["right"]))
                 for t in d["trees"]]
        for t in trees:
            if not (0 <= t.left <= 1 and 0 <= t.right <= 1):
                raise ValueError("leaf fractions must lie in [0, 1]")
            if not 0 <= t.feature < d["n_features"]:
                raise ValueError(f"tree references feature {t.feature} of {d['n_features']}")
        return cls(trees, int(d["n_features"]), int(d["n_estimators"]), int(d["max_depth"]),
                   int(d["max_features"]), int(d["seed"]), dict(d.get("meta", {})))


def tree_draws(seed: int, n_samples: int, n_features: int, n_estimators: int,
               max_features: Optional[int] = None):
    """Per-tree (bootstrap indices, candidate features), replayable from the seed."""
    m = max(1, math.isqrt(n_features)) if max_features is None else max_features
    if not 1 <= m <= n_features:
        raise ValueError(f"max_features must lie in [1, {n_features}], got {m}")
    out = []
    for child in np.random.SeedSequence(seed).spawn(n_estimators):
        rng = np.random.default_rng(child)
        boot = rng.integers(0, n_samples, size=n_samples)
        feats = rng.choice(n_features, size=m, replace=False)
        out.append((boot, feats))
    return out


def fit_forest(X, y, params: ForestParams = ForestParams()) -> StumpForest:
    """Bagged stumps: each tree fits the best split among floor(sqrt(d))
    random features on its own bootstrap sample."""
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], FeatureVector):
        if len({len(v) for v in X}) != 1:
            raise ValueError("feature vectors have inconsistent lengths")
        X = [v.values for v in X]
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2:
        raise ValueError("feature vectors have inconsistent lengths")
    if X.shape[0] == 0 or X.shape[0] != y.shape[0]:
        raise ValueError(f"need matching, non-empty X and y; got {X.shape[0]} and {y.shape[0]}")
    d = X.shape[1]
    draws = tree_draws(params.seed, X.shape[0], d, params.n_estimators, params.max_features)
    trees = [best_stump(X[boot], y[boot], feats) for boot, feats in draws]
    return StumpForest(trees, d, params.n_estimators, params.max_depth, len(draws[0][1]), params.seed)


def forest_predict_proba(forest: StumpForest, x) -> float:
    values = x.values if isinstance(x, FeatureVector) else x
    return float(forest.predict_proba(np.asarray(values, dtype=np.float64)[None, :])[0])


# -- thresholds -------------------------------------------------------------

@dataclass
class ThresholdReport:
    best_threshold: float
    best_f1: float
    plateau: tuple[float, float]
    epsilon: float
    grid: float
    thresholds: list[float] = field(default_factory=list, repr=False)
    f1: list[float] = field(default_factory=list, repr=False)

    @property
    def plateau_width(self) -> float:
        return self.plateau[1] - self.plateau[0]

    def to_dict(self, curve: bool = True) -> dict:
        d = {"best_threshold": self.best_threshold, "best_f1": self.best_f1,
             "plateau": list(self.plateau), "plateau_width": self.plateau_width,
             "epsilon": self.epsilon, "grid": self.grid}
        if curve:
            d["curve"] = {"threshold": list(self.thresholds), "f1": list(self.f1)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ThresholdReport":
        curve = d.get("curve", {})
        return cls(d["best_threshold"], d["best_f1"], tuple(d["plateau"]), d["epsilon"], d["grid"],
                   list(curve.get("threshold", [])), list(curve.get("f1", [])))


def threshold_grid(grid: float) -> np.ndarray:
    if not 0 < grid < 1:
        raise ValueError(f"grid must lie in (0, 1), got {grid}")
    n = int(round(1.0 / grid))
    if abs(n * grid - 1.0) > 1e-9:
        raise ValueError(f"grid {grid} does not divide [0, 1] evenly")
    return np.arange(n + 1) / n


def _report(thresholds, tp, fp, fn, epsilon, grid) -> ThresholdReport:
    denom = 2 * tp + fp + fn
    f1 = np.where(tp > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    best = int(np.argmax(f1))  # first index, so the lowest threshold on ties
    ok = f1 >= f1[best] - epsilon - 1e-12
    lo = best
    while lo > 0 and ok[lo - 1]:
        lo -= 1
    hi = best
    while hi < len(f1) - 1 and ok[hi + 1]:
        hi += 1
    return ThresholdReport(float(thresholds[best]), float(f1[best]),
                           (float(thresholds[lo]), float(thresholds[hi])), epsilon, grid,
                           [float(t) for t in thresholds], [float(v) for v in f1])


def sweep_threshold(scores, labels, epsilon: float = 0.01, grid: float = 0.001) -> ThresholdReport:
    """F1 of ``score >= t`` against binary labels over a threshold grid.

    The plateau is the widest contiguous run of grid thresholds around the
    best one where F1 stays within ``epsilon`` of the best.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if not labels.any():
        raise ValueError("F1 is undefined without positives")
    t = threshold_grid(grid)
    pos = np.sort(scores[labels])
    neg = np.sort(scores[~labels])
    tp = len(pos) - np.searchsorted(pos, t, side="left")
    fp = len(neg) - np.searchsorted(neg, t, side="left")
    fn = len(pos) - tp
    return _report(t, tp, fp, fn, epsilon, grid)


def sweep_detection_threshold(images: Sequence[tuple[Sequence[Detection], Sequence[Annotation]]],
                              radius: float = 30.0, epsilon: float = 0.01,
                              grid: float = 0.001) -> ThresholdReport:
    """Sweep the detection score threshold against point ground truth.

    Greedy matching visits detections by score, so the matches among the
    detections kept at any threshold are exactly the full-list matches
    restricted to them; one matching per image serves the whole grid.
    """
    t = threshold_grid(grid)
    matched, unmatched, n_gt = [], [], 0
    for dets, gt in images:
        res = match_detections(list(dets), list(gt), radius)
        hit = {i for i, _ in res.pairs}
        for i, d in enumerate(dets):
            (matched if i in hit else unmatched).append(d.score)
        n_gt += len(gt)
    if n_gt == 0:
        raise ValueError("F1 is undefined without ground-truth points")
    m = np.sort(np.asarray(matched, dtype=np.float64))
    u = np.sort(np.asarray(unmatched, dtype=np.float64))
    tp = len(m) - np.searchsorted(m, t, side="left")
    fp = len(u) - np.searchsorted(u, t, side="left")
    return _report(t, tp, fp, n_gt - tp, epsilon, grid)
