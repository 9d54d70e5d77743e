"""Test-time augmentation views with exact inverses, plus seeded
training-time augmentation."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Optional

import cv2
import numpy as np

from .core import ProbabilityMap, check_raster


@dataclass(frozen=True, order=True)
class RigidTransform:
    """Horizontal flip (optional) followed by ``rotation`` counter-clockwise
    quarter turns. The eight combinations are the square's symmetry group."""

    rotation: int = 0  # quarter turns: 0, 1, 2, 3 -> 0/90/180/270 degrees
    flip_horizontal: bool = False

    def __post_init__(self):
        if self.rotation not in (0, 1, 2, 3):
            raise ValueError(f"rotation must be 0..3 quarter turns, got {self.rotation}")

    @property
    def degrees(self) -> int:
        return 90 * self.rotation

    @property
    def is_identity(self) -> bool:
        return self.rotation == 0 and not self.flip_horizontal

    @property
    def preserves_shape(self) -> bool:
        return self.rotation % 2 == 0

    def apply(self, a: np.ndarray) -> np.ndarray:
        """Transform the first two axes of ``a``."""
        if self.flip_horizontal:
            a = a[:, ::-1]
        return np.ascontiguousarray(np.rot90(a, self.rotation, axes=(0, 1)))

    def invert(self, a: np.ndarray) -> np.ndarray:
        a = np.rot90(a, -self.rotation, axes=(0, 1))
        if self.flip_horizontal:
            a = a[:, ::-1]
        return np.ascontiguousarray(a)

    def inverse(self) -> "RigidTransform":
        # F R^k inverted is R^-k F = F R^k, so flips are self-inverse
        if self.flip_horizontal:
            return self
        return RigidTransform((-self.rotation) % 4, False)

    def then(self, other: "RigidTransform") -> "RigidTransform":
        """The transform equal to applying ``self`` and then ``other``."""
        # R^a F = F R^-a
        if other.flip_horizontal:
            return RigidTransform((other.rotation - self.rotation) % 4, not self.flip_horizontal)
        return RigidTransform((self.rotation + other.rotation) % 4, self.flip_horizontal)


IDENTITY = RigidTransform()
GROUP = tuple(RigidTransform(r, f) for f in (False, True) for r in range(4))
SHAPE_PRESERVING = tuple(t for t in GROUP if t.preserves_shape)


TTA_MODES = {"seg3": 3, "cls3_crop": 3, "cls5": 5}


@dataclass(frozen=True)
class TtaPolicy:
    mode: str = "seg3"
    k: Optional[int] = None
    crop_fraction: float = 0.85  # lower bound of the per-view crop fraction (cls3_crop)
    seed: int = 0
    allow_rotation: bool = True  # False restricts views to shape-preserving transforms

    def __post_init__(self):
        if self.mode not in TTA_MODES:
            raise ValueError(f"unknown TTA mode {self.mode!r}")
        if self.k is None:
            object.__setattr__(self, "k", TTA_MODES[self.mode])
        if self.k != TTA_MODES[self.mode]:
            raise ValueError(f"mode {self.mode} uses k={TTA_MODES[self.mode]}, got {self.k}")
        if not 0 < self.crop_fraction <= 1:
            raise ValueError(f"crop_fraction must lie in (0, 1], got {self.crop_fraction}")

    def with_seed(self, seed: int) -> "TtaPolicy":
        return TtaPolicy(self.mode, self.k, self.crop_fraction, seed, self.allow_rotation)


def item_seed(base: int, key: str, index: int = 0) -> int:
    """Stable per-item seed from a base seed, an image id and an item index."""
    ss = np.random.SeedSequence([base & 0xFFFFFFFF, zlib.crc32(key.encode()), index])
    return int(ss.generate_state(1)[0])


@dataclass(frozen=True)
class View:
    transform: RigidTransform
    crop_fraction: float = 1.0
    pixels: np.ndarray = field(default=None, compare=False, repr=False)


def center_crop_resize(a: np.ndarray, fraction: float) -> np.ndarray:
    """Centred square crop of side round(fraction * side), bilinearly resized back."""
    h, w = a.shape[:2]
    if fraction >= 1.0:
        return a.copy()
    ch, cw = max(1, int(round(h * fraction))), max(1, int(round(w * fraction)))
    y0, x0 = (h - ch) // 2, (w - cw) // 2
    crop = np.ascontiguousarray(a[y0:y0 + ch, x0:x0 + cw])
    return cv2.resize(crop, (w, h), interpolation=cv2.INTER_LINEAR)


def sample_transforms(policy: TtaPolicy, rng: np.random.Generator) -> list[RigidTransform]:
    pool = [t for t in (GROUP if policy.allow_rotation else SHAPE_PRESERVING) if not t.is_identity]
    if policy.k - 1 > len(pool):
        raise ValueError(f"cannot draw {policy.k} distinct views from {len(pool) + 1} transforms")
    picks = rng.choice(len(pool), size=policy.k - 1, replace=False)
    return [IDENTITY] + [pool[i] for i in picks]


def make_views(image: np.ndarray, policy: TtaPolicy) -> list[View]:
    """``policy.k`` augmented views; view 0 is always the untouched input.

    Further views are distinct non-identity members of the symmetry group,
    drawn without replacement. In ``cls3_crop`` mode those views are also
    centre-cropped by a fraction drawn from [crop_fraction, 1] and resized
    back to the input size.
    """
    h, w = image.shape[:2]
    if policy.allow_rotation and h != w:
        raise ValueError(f"rotation views need a square input, got {w}x{h}")
    rng = np.random.default_rng(policy.seed)
    views = []
    for i, t in enumerate(sample_transforms(policy, rng)):
        fraction = 1.0
        if policy.mode == "cls3_crop" and i > 0:
            fraction = float(rng.uniform(policy.crop_fraction, 1.0))
        px = center_crop_resize(image, fraction) if fraction < 1.0 else image
        views.append(View(t, fraction, t.apply(px)))
    return views


def invert_map(pmap: ProbabilityMap, t: RigidTransform) -> ProbabilityMap:
    """Map a prediction made on a transformed view back to the original frame."""
    if pmap.height != pmap.width and not t.preserves_shape:
        raise ValueError(f"cannot undo a quarter turn on a non-square {pmap.width}x{pmap.height} map")
    return ProbabilityMap(t.invert(pmap.values), pmap.origin)


def apply_map(pmap: ProbabilityMap, t: RigidTransform) -> ProbabilityMap:
    if pmap.height != pmap.width and not t.preserves_shape:
        raise ValueError(f"cannot quarter-turn a non-square {pmap.width}x{pmap.height} map")
    return ProbabilityMap(t.apply(pmap.values), pmap.origin)


def average_seg_tta(maps, transforms) -> ProbabilityMap:
    """Per-pixel mean of the view predictions after undoing each view's transform."""
    maps, transforms = list(maps), list(transforms)
    if len(maps) != len(transforms):
        raise ValueError(f"{len(maps)} maps but {len(transforms)} transforms")
    if not maps:
        raise ValueError("no maps to average")
    inverted = [invert_map(m, t).values for m, t in zip(maps, transforms)]
    shapes = {v.shape for v in inverted}
    if len(shapes) != 1:
        raise ValueError(f"inverted maps disagree in shape: {sorted(shapes)}")
    stack = np.stack(inverted)
    mean = np.clip(stack.mean(axis=0), stack.min(axis=0), stack.max(axis=0))
    return ProbabilityMap(mean, maps[0].origin)


@dataclass(frozen=True)
class AugmentConfig:
    """Training-time augmentation. Probabilities gate each step; ranges are
    sampled uniformly. Steps run in field order."""

    crop_prob: float = 0.5
    crop_scale: tuple[float, float] = (0.8, 1.0)
    flip_prob: float = 0.5
    rotate_prob: float = 0.5
    color_prob: float = 0.8
    brightness: tuple[float, float] = (-0.1, 0.1)  # relative change
    hue: tuple[float, float] = (-0.05, 0.05)  # fraction of the hue circle
    saturation: tuple[float, float] = (-0.1, 0.1)  # relative change
    noise_prob: float = 0.3
    noise_sigma: float = 5.0  # in 8-bit intensity units
    blur_prob: float = 0.2
    blur_kernel: int = 3

    def __post_init__(self):
        for name in ("crop_prob", "flip_prob", "rotate_prob", "color_prob", "noise_prob", "blur_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        for name in ("brightness", "hue", "saturation"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is reversed: {(lo, hi)}")
        if self.brightness[0] < -1 or self.saturation[0] < -1:
            raise ValueError("brightness/saturation changes below -100% are invalid")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ValueError(f"blur_kernel must be a positive odd integer, got {self.blur_kernel}")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(crop_prob=0, flip_prob=0, rotate_prob=0, color_prob=0, noise_prob=0, blur_prob=0)


def augment_train(patch: np.ndarray, seed: int, config: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Seeded random augmentation of an RGB uint8 patch.

    Order: crop-and-resize, flip, quarter-turn rotation (square inputs
    only), brightness/hue/saturation, Gaussian noise, Gaussian blur.
    """
    img = check_raster(patch).copy()
    rng = np.random.default_rng(seed)
    # draw every variate up front so the stream does not depend on which steps fire
    u = rng.random(6)
    crop_s = rng.uniform(*config.crop_scale)
    k = int(rng.integers(1, 4))
    b = rng.uniform(*config.brightness)
    hshift = rng.uniform(*config.hue)
    s = rng.uniform(*config.saturation)
    noise_seed = int(rng.integers(2**32))

    if u[0] < config.crop_prob:
        img = center_crop_resize(img, crop_s)
    if u[1] < config.flip_prob:
        img = np.ascontiguousarray(img[:, ::-1])
    if u[2] < config.rotate_prob and img.shape[0] == img.shape[1]:
        img = np.ascontiguousarray(np.rot90(img, k))
    if u[3] < config.color_prob:
        img = _color_jitter(img, b, hshift, s)
    if u[4] < config.noise_prob and config.noise_sigma > 0:
        noise = np.random.default_rng(noise_seed).normal(0.0, config.noise_sigma, img.shape)
        img = np.clip(np.rint(img + noise), 0, 255).astype(np.uint8)
    if u[5] < config.blur_prob and config.blur_kernel > 1:
        img = cv2.GaussianBlur(img, (config.blur_kernel, config.blur_kernel), 0)
    return img


def _color_jitter(img: np.ndarray, brightness: float, hue: float, saturation: float) -> np.ndarray:
    out = img
    if brightness != 0:
        out = np.clip(np.rint(out.astype(np.float64) * (1.0 + brightness)), 0, 255).astype(np.uint8)
    if hue != 0 or saturation != 0:
        hsv = cv2.cvtColor(out, cv2.COLOR_RGB2HSV).astype(np.float64)
        # OpenCV 8-bit hue runs over [0, 180)
        hsv[..., 0] = np.mod(np.rint(hsv[..., 0] + hue * 180.0), 180.0)
        hsv[..., 1] = np.clip(np.rint(hsv[..., 1] * (1.0 + saturation)), 0, 255)
        out = cv2.cvtColor(hsv.astype(np.uint8), cv2.COLOR_HSV2RGB)
    return out
