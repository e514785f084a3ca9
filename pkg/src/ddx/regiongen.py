"""Region sampling and synthesis of locally distorted detection images."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ddx.distortions import (
    DISTORTIONS, INTEGER_PARAMS, DistortionClass, DistortionSpec, apply_region, level_grid,
)
from ddx.imgcore import Rect, center_crop, check_image

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegionConfig:
    count_min: int
    count_max: int
    ratio_min: float
    ratio_max: float
    image_size: int = 300
    max_rejection_attempts: int = 100
    max_size_redraws: int = 10
    max_layout_attempts: int = 200

    def __post_init__(self):
        if not 1 <= self.count_min <= self.count_max:
            raise ValueError(f"need 1 <= count_min <= count_max, got {self.count_min}, {self.count_max}")
        if not 0 < self.ratio_min <= self.ratio_max <= 1:
            raise ValueError(f"need 0 < ratio_min <= ratio_max <= 1, got {self.ratio_min}, {self.ratio_max}")
        if self.image_size < 1:
            raise ValueError("image_size must be positive")


PRESETS = {
    "basic": RegionConfig(1, 4, 0.3, 0.7),
    "difficult": RegionConfig(5, 9, 0.1, 0.3),
}


def preset(variant: str) -> RegionConfig:
    try:
        return PRESETS[variant]
    except KeyError:
        raise ValueError(f"unknown variant {variant!r}; expected basic or difficult") from None


@dataclass(frozen=True)
class RegionAnnotation:
    rect: Rect
    spec: DistortionSpec

    def __post_init__(self):
        if self.spec.cls is DistortionClass.Pristine:
            raise ValueError("region annotations cannot be Pristine")


class Layout(NamedTuple):
    rects: list[Rect]
    requested: int
    degraded: int  # regions dropped because no placement was found


def _side(ratio: float, size: int) -> int:
    return min(size, max(1, int(round(ratio * size))))


def _free_positions(w: int, h: int, placed: list[Rect], size: int) -> np.ndarray:
    # top-left corners (y, x) of every w x h placement disjoint from `placed`;
    # a corner collides with r iff it lies in (r.x - w, r.x1) x (r.y - h, r.y1)
    blocked = np.zeros((size - h + 1, size - w + 1), dtype=bool)
    for r in placed:
        blocked[max(0, r.y - h + 1):r.y1, max(0, r.x - w + 1):r.x1] = True
    if blocked.all():
        return np.empty((0, 2), dtype=np.intp)
    return np.argwhere(~blocked)


def _place(w: int, h: int, placed: list[Rect], cfg: RegionConfig,
           rng: np.random.Generator) -> Rect | None:
    size = cfg.image_size
    n = cfg.max_rejection_attempts
    # same i.i.d. candidate sequence as drawing one at a time; first survivor wins
    xs = rng.integers(0, size - w + 1, size=n)
    ys = rng.integers(0, size - h + 1, size=n)
    ok = np.ones(n, dtype=bool)
    for r in placed:
        ok &= (xs >= r.x1) | (xs + w <= r.x) | (ys >= r.y1) | (ys + h <= r.y)
    hits = np.flatnonzero(ok)
    if hits.size:
        i = hits[0]
        return Rect(int(xs[i]), int(ys[i]), w, h)
    # rejection exhausted: draw uniformly from the exact free set instead
    free = _free_positions(w, h, placed, size)
    if len(free) == 0:
        return None
    y, x = free[int(rng.integers(len(free)))]
    return Rect(int(x), int(y), w, h)


def _try_layout(n: int, cfg: RegionConfig, rng: np.random.Generator) -> list[Rect] | None:
    placed: list[Rect] = []
    for _ in range(n):
        rect = None
        for _ in range(cfg.max_size_redraws):
            rw, rh = rng.uniform(cfg.ratio_min, cfg.ratio_max, size=2)
            rect = _place(_side(rw, cfg.image_size), _side(rh, cfg.image_size), placed, cfg, rng)
            if rect is not None:
                break
        if rect is None:
            return None
        placed.append(rect)
    return placed


def sample_layout(cfg: RegionConfig, rng: np.random.Generator) -> Layout:
    """Draw a region count and place that many pairwise-disjoint rects.

    Each rect is placed by rejection sampling, falling back to a uniform draw
    over the exact set of free placements; a rect with no free placement
    gets a fresh size, and after ``max_size_redraws`` failures the whole
    layout is restarted. Only when ``max_layout_attempts`` layouts fail is the
    count lowered by one (never below 1).
    """
    requested = int(rng.integers(cfg.count_min, cfg.count_max + 1))
    n = requested
    while True:
        for _ in range(cfg.max_layout_attempts):
            rects = _try_layout(n, cfg, rng)
            if rects is not None:
                if n < requested:
                    log.info("region count degraded from %d to %d", requested, n)
                return Layout(rects, requested, requested - n)
        if n == 1:
            raise RuntimeError(f"cannot place a single region with {cfg}")
        n -= 1


def sample_regions(cfg: RegionConfig, rng: np.random.Generator) -> list[Rect]:
    return sample_layout(cfg, rng).rects


def sample_level(cls, rng: np.random.Generator) -> DistortionSpec:
    """Uniform severity over the class's grid range; integer params rounded."""
    cls = DistortionClass.parse(cls)
    _, (lo, hi) = level_grid(cls)
    p = float(rng.uniform(lo, hi))
    if cls in INTEGER_PARAMS:
        p = int(round(p))
    return DistortionSpec(cls, p)


def synthesize_detection_image(ref: np.ndarray, cfg: RegionConfig, rng: np.random.Generator
                               ) -> tuple[np.ndarray, list[RegionAnnotation]]:
    """Center-crop ``ref`` (normalized) and distort randomly placed regions."""
    check_image(ref)
    size = cfg.image_size
    if ref.shape[0] < size or ref.shape[1] < size:
        raise ValueError(f"reference {ref.shape[1]}x{ref.shape[0]} is smaller than {size}x{size}")
    img = center_crop(np.asarray(ref, dtype=np.float64), size, size)
    annotations = []
    for rect in sample_regions(cfg, rng):
        cls = DISTORTIONS[int(rng.integers(len(DISTORTIONS)))]
        spec = sample_level(cls, rng)
        img = apply_region(img, rect, spec, rng)
        annotations.append(RegionAnnotation(rect, spec))
    return img, annotations
