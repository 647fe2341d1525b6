"""Rotated-square dataset for the toy autoencoder experiment.

Binary 64x64 images of a square at a given scale, translation, and in-plane
rotation, plus the four named sampling distributions (a)-(d) that vary scale
and translation. A square at distribution scale 1.0 is drawn with side
BASE_SCALE * canvas so that every rotation fits and smaller squares keep a
translation margin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

CANVAS_SIZE = 64
BASE_SCALE = 0.5  # drawn side fraction of the canvas at distribution scale 1.0

_SQRT_HALF = math.sqrt(2.0) / 2.0

# name -> (scale sampler bounds or fixed, translated?)
_DISTRIBUTIONS = {
    "a": (1.0, False),
    "b": (0.6, False),
    "c": (1.0, True),
    "d": ((0.5, 1.0), True),
}


@dataclass(frozen=True)
class SquareSpec:
    """Square placement: side fraction ``s``, center offset ``t_xy``, rotation ``r``."""

    s: float
    t_xy: tuple[float, float]
    r: float

    def __post_init__(self):
        if not 0.0 < self.s <= 1.0:
            raise ValueError(f"scale must be in (0, 1], got {self.s}")
        if max(abs(self.t_xy[0]), abs(self.t_xy[1])) > 1.0:
            raise ValueError(f"translation fractions must be within [-1, 1], got {self.t_xy}")
        if not 0.0 <= self.r < 2.0 * math.pi:
            raise ValueError(f"rotation must be in [0, 2*pi), got {self.r}")


def draw_square(spec: SquareSpec, size: int = CANVAS_SIZE) -> np.ndarray:
    """Rasterize the square: a pixel is on iff its center lies inside.

    Raises ValueError when the placed square does not fit the canvas.
    """
    images = draw_batch([spec], size)
    return images[0]


def draw_batch(specs, size: int = CANVAS_SIZE) -> np.ndarray:
    """Vectorized rasterization of several squares into a (n, size, size) array."""
    sides = np.array([sp.s for sp in specs]) * size
    cx = size / 2.0 + np.array([sp.t_xy[0] for sp in specs]) * size
    cy = size / 2.0 + np.array([sp.t_xy[1] for sp in specs]) * size
    r = np.array([sp.r for sp in specs])
    cos_r, sin_r = np.cos(r), np.sin(r)
    extent = (sides / 2.0) * (np.abs(cos_r) + np.abs(sin_r))
    bad = (cx - extent < 0) | (cx + extent > size) | (cy - extent < 0) | (cy + extent > size)
    if bad.any():
        raise ValueError(f"square {int(np.flatnonzero(bad)[0])} exceeds the {size}x{size} canvas")
    centers = np.arange(size) + 0.5
    dx = centers[None, None, :] - cx[:, None, None]
    dy = centers[None, :, None] - cy[:, None, None]
    cos_b = cos_r[:, None, None]
    sin_b = sin_r[:, None, None]
    ux = cos_b * dx + sin_b * dy
    uy = -sin_b * dx + cos_b * dy
    half = (sides / 2.0)[:, None, None]
    inside = (np.abs(ux) <= half) & (np.abs(uy) <= half)
    return inside.astype(np.float32)


def distribution_names() -> tuple[str, ...]:
    return tuple(_DISTRIBUTIONS)


def sample_distribution(name: str, rng, rotation: float | None = None) -> SquareSpec:
    """Draw a SquareSpec from one of the named distributions.

    Rotation is uniform on [0, 2*pi) unless given. Translation draws are
    uniform on [-1, 1] and then scaled by the margin the rotated square
    leaves on the canvas, so the invariant "fits after placement" always
    holds; scale draws are relative to BASE_SCALE.
    """
    try:
        scale_spec, translated = _DISTRIBUTIONS[name]
    except KeyError:
        raise ValueError(f"unknown distribution {name!r}; expected one of {sorted(_DISTRIBUTIONS)}") from None
    r = float(rng.uniform(0.0, 2.0 * math.pi)) if rotation is None else float(rotation) % (2.0 * math.pi)
    if isinstance(scale_spec, tuple):
        s_rel = float(rng.uniform(*scale_spec))
    else:
        s_rel = float(scale_spec)
    side_frac = s_rel * BASE_SCALE
    if translated:
        margin = 0.5 - side_frac * _SQRT_HALF
        t = (float(rng.uniform(-1.0, 1.0)) * margin, float(rng.uniform(-1.0, 1.0)) * margin)
    else:
        t = (0.0, 0.0)
    return SquareSpec(side_frac, t, r)


def canonical_spec(name: str, rotation: float) -> SquareSpec:
    """The centered fixed-scale square of a distribution at a given rotation.

    Only defined for distributions with a fixed scale; used as the clean
    reconstruction target when training across distributions.
    """
    scale_spec, _ = _DISTRIBUTIONS[name]
    if isinstance(scale_spec, tuple):
        raise ValueError(f"distribution {name!r} has no fixed scale; cannot form a canonical target")
    return SquareSpec(float(scale_spec) * BASE_SCALE, (0.0, 0.0), float(rotation) % (2.0 * math.pi))
