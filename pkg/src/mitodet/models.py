"""Scorer contracts, a named backend registry, deterministic oracle scorers
and checkpoint selection.

Scorers receive the pixels of one view plus a :class:`ViewContext` telling
where the view came from. Real models ignore the context; the oracles use it
to simulate a perfect model without looking at pixels.
"""

from __future__ import annotations

import json
import logging
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence, runtime_checkable

import cv2
import numpy as np

from .core import Annotation, Label, Point, ProbabilityMap
from .tta import IDENTITY, RigidTransform, TtaPolicy, item_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ViewContext:
    """Where a view sits in its source image.

    For tiles ``origin`` is the tile's top-left corner; for patches ``center``
    is the patch centre. ``transform`` is the rigid transform that produced
    the view from the untransformed tile or patch.
    """

    image_id: str = ""
    origin: Optional[tuple[int, int]] = None
    center: Optional[Point] = None
    transform: RigidTransform = IDENTITY
    view_index: int = 0
    crop_fraction: float = 1.0


@runtime_checkable
class Segmenter(Protocol):
    name: str

    def segment(self, tile: np.ndarray, context: ViewContext = ViewContext()) -> np.ndarray:
        """Per-pixel probabilities with the tile's (height, width)."""


@runtime_checkable
class Classifier(Protocol):
    name: str
    input_size: int

    def classify(self, patch: np.ndarray, context: ViewContext = ViewContext()) -> float:
        """Probability that the patch shows the positive class."""


class _Locked:
    """Serialises calls into a scorer that is not thread-safe."""

    def __init__(self, inner):
        self._inner = inner
        self._lock = threading.Lock()
        self.name = inner.name
        if hasattr(inner, "input_size"):
            self.input_size = inner.input_size

    def segment(self, tile, context=ViewContext()):
        with self._lock:
            return self._inner.segment(tile, context)

    def classify(self, patch, context=ViewContext()):
        with self._lock:
            return self._inner.classify(patch, context)


def thread_safe(scorer):
    """Wrap ``scorer`` in a lock unless it declares ``thread_safe = True``."""
    return scorer if getattr(scorer, "thread_safe", False) else _Locked(scorer)


def clamp_probabilities(values, source: str, tol: float = 1e-3):
    """Clamp scorer output into [0, 1].

    Small float excursions are clamped with a warning; anything further out,
    or non-finite, means a broken backend and raises.
    """
    a = np.asarray(values, dtype=np.float64)
    if not np.isfinite(a).all():
        raise ValueError(f"{source} produced non-finite probabilities")
    lo, hi = (a.min(), a.max()) if a.size else (0.0, 1.0)
    if lo < -tol or hi > 1 + tol:
        raise ValueError(f"{source} produced probabilities in [{lo}, {hi}], far outside [0, 1]")
    if lo < 0 or hi > 1:
        log.warning("%s produced probabilities in [%g, %g]; clamping to [0, 1]", source, lo, hi)
        a = np.clip(a, 0.0, 1.0)
    return a


def run_segmenter(seg, tile: np.ndarray, context: ViewContext) -> np.ndarray:
    out = clamp_probabilities(seg.segment(tile, context), seg.name)
    if out.shape != tile.shape[:2]:
        raise ValueError(f"{seg.name} returned shape {out.shape} for a tile of {tile.shape[:2]}")
    return out


def run_classifier(clf, patch: np.ndarray, context: ViewContext) -> float:
    if patch.shape[0] != clf.input_size or patch.shape[1] != clf.input_size:
        patch = cv2.resize(patch, (clf.input_size, clf.input_size), interpolation=cv2.INTER_LINEAR)
    return float(clamp_probabilities(clf.classify(patch, context), clf.name))


# -- oracles ----------------------------------------------------------------

def _points_by_image(planted: Sequence[Annotation], labels) -> dict[str, np.ndarray]:
    by: dict[str, list] = {}
    for a in planted:
        if a.label in labels:
            by.setdefault(a.image, []).append((a.point.x, a.point.y))
    return {k: np.asarray(v, dtype=np.float64) for k, v in by.items()}


class OracleSegmenter:
    """Emits ``p_in`` inside disks around planted points and ``p_out``
    elsewhere, plus clamped Gaussian noise seeded by the tile origin."""

    thread_safe = True

    def __init__(self, planted, radius=45, p_in=0.9, p_out=0.05, noise=0.0, seed=0,
                 labels=(Label.MITOSIS, Label.HARD_NEGATIVE), name="oracle-segmenter"):
        if not 0 <= p_out <= p_in <= 1:
            raise ValueError(f"need 0 <= p_out <= p_in <= 1, got p_out={p_out}, p_in={p_in}")
        self.points = _points_by_image(planted, {Label(x) for x in labels})
        self.radius, self.p_in, self.p_out = radius, p_in, p_out
        self.noise, self.seed, self.name = noise, seed, name

    def render(self, image_id: str, origin: tuple[int, int], width: int, height: int) -> np.ndarray:
        """Untransformed tile prediction."""
        ox, oy = origin
        out = np.full((height, width), self.p_out, dtype=np.float64)
        pts = self.points.get(image_id)
        if pts is not None and len(pts):
            ys, xs = np.mgrid[oy:oy + height, ox:ox + width]
            r = self.radius
            near = pts[(pts[:, 0] > ox - r - 1) & (pts[:, 0] < ox + width + r + 1)
                       & (pts[:, 1] > oy - r - 1) & (pts[:, 1] < oy + height + r + 1)]
            for x, y in near:
                out[(xs - x) ** 2 + (ys - y) ** 2 <= r * r] = self.p_in
        if self.noise > 0:
            rng = np.random.default_rng(item_seed(self.seed, image_id, ox * 1_000_003 + oy))
            out = np.clip(out + rng.normal(0.0, self.noise, out.shape), 0.0, 1.0)
        return out

    def segment(self, tile, context=ViewContext()):
        if context.origin is None:
            raise ValueError("the oracle segmenter needs the tile origin in its context")
        t = context.transform
        h, w = tile.shape[:2]
        if not t.preserves_shape:
            h, w = w, h
        return t.apply(self.render(context.image_id, context.origin, w, h))


def oracle_segmenter(planted, radius=45, p_in=0.9, p_out=0.05, noise=0.0, seed=0, **kw) -> OracleSegmenter:
    return OracleSegmenter(planted, radius, p_in, p_out, noise, seed, **kw)


class OracleClassifier:
    """Score = sigmoid(sharpness * (radius - d)), d the distance from the
    patch centre to the nearest planted positive in the same image."""

    thread_safe = True

    def __init__(self, planted, radius=15.0, sharpness=0.5, seed=0, noise=0.0,
                 labels=(Label.MITOSIS,), input_size=140, name="oracle-classifier"):
        if not sharpness > 0:
            raise ValueError(f"sharpness must be > 0, got {sharpness}")
        self.points = _points_by_image(planted, {Label(x) for x in labels})
        self.radius, self.sharpness, self.seed, self.noise = radius, sharpness, seed, noise
        self.input_size, self.name = input_size, name

    def score_at(self, image_id: str, center: Point) -> float:
        pts = self.points.get(image_id)
        d = math.inf if pts is None or not len(pts) else float(
            np.hypot(pts[:, 0] - center.x, pts[:, 1] - center.y).min())
        z = self.sharpness * (self.radius - d)
        # stable logistic
        return 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))

    def classify(self, patch, context=ViewContext()):
        if context.center is None:
            raise ValueError("the oracle classifier needs the patch centre in its context")
        s = self.score_at(context.image_id, context.center)
        if self.noise > 0:
            key = f"{context.image_id}:{context.center.x:.3f}:{context.center.y:.3f}"
            s += np.random.default_rng(item_seed(self.seed, key, context.view_index)).normal(0, self.noise)
        return min(1.0, max(0.0, s))


def oracle_classifier(planted, radius=15.0, sharpness=0.5, seed=0, **kw) -> OracleClassifier:
    return OracleClassifier(planted, radius, sharpness, seed, **kw)


class ConstantScorer:
    """Returns a fixed probability; useful as a placeholder backend."""

    thread_safe = True

    def __init__(self, value=0.0, input_size=140, name="constant"):
        self.value, self.input_size, self.name = float(value), input_size, name

    def segment(self, tile, context=ViewContext()):
        return np.full(tile.shape[:2], self.value)

    def classify(self, patch, context=ViewContext()):
        return self.value


# -- registry ---------------------------------------------------------------

@dataclass(frozen=True)
class BackendSpec:
    name: str
    kind: str  # segmenter | classifier
    backend: str
    path: Optional[str] = None
    input_size: int = 140
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("segmenter", "classifier"):
            raise ValueError(f"backend kind must be segmenter or classifier, got {self.kind!r}")


_BACKENDS: dict[str, Callable[[BackendSpec], object]] = {}


def register_backend(backend_id: str):
    def deco(fn):
        _BACKENDS[backend_id] = fn
        return fn
    return deco


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def load_scorer(spec: BackendSpec):
    try:
        factory = _BACKENDS[spec.backend]
    except KeyError:
        raise ValueError(f"unknown backend {spec.backend!r}; known: {available_backends()}") from None
    scorer = factory(spec)
    want = Segmenter if spec.kind == "segmenter" else Classifier
    if not isinstance(scorer, want):
        raise TypeError(f"backend {spec.backend!r} does not provide a {spec.kind}")
    return scorer


def _planted_from_path(path) -> list[Annotation]:
    from .io import read_annotations  # avoid import cycle

    if path is None:
        raise ValueError("oracle backends need a path to annotation files")
    p = Path(path)
    files = sorted(p.glob("*.json")) if p.is_dir() else [p]
    out = []
    for f in files:
        out.extend(read_annotations(f)[1])
    return out


@register_backend("oracle-segmenter")
def _oracle_seg_backend(spec: BackendSpec):
    o = dict(spec.options)
    labels = o.pop("labels", ("mitosis", "hard_negative"))
    return OracleSegmenter(_planted_from_path(spec.path), labels=labels, name=spec.name, **o)


@register_backend("oracle-classifier")
def _oracle_cls_backend(spec: BackendSpec):
    o = dict(spec.options)
    labels = o.pop("labels", ("mitosis",))
    return OracleClassifier(_planted_from_path(spec.path), labels=labels,
                            input_size=spec.input_size, name=spec.name, **o)


@register_backend("constant")
def _constant_backend(spec: BackendSpec):
    return ConstantScorer(spec.options.get("value", 0.0), spec.input_size, spec.name)


# -- rosters and checkpoint selection ---------------------------------------

@dataclass(frozen=True)
class EnsembleRoster:
    """Exactly three classifiers in a fixed order; feature layout follows it."""

    classifiers: tuple
    tta_policy: TtaPolicy

    def __post_init__(self):
        object.__setattr__(self, "classifiers", tuple(self.classifiers))
        if len(self.classifiers) != 3:
            raise ValueError(f"an ensemble roster holds exactly 3 classifiers, got {len(self.classifiers)}")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.classifiers]


@dataclass(frozen=True)
class MetricSeries:
    values: tuple[float, ...]
    name: str = "sensitivity"


def select_best_epoch(series) -> int:
    """Index of the highest value; the earliest epoch wins ties."""
    values = list(series.values if isinstance(series, MetricSeries) else series)
    if not values:
        raise ValueError("cannot select an epoch from an empty series")
    return int(np.argmax(values))

