"""Domain-randomization image augmentations for autoencoder training.

Operations run in a fixed order (add, contrast, multiply, invert, blur,
geometric, occlusion) on float images in [0, 1]. Every application is
logged with its resolved parameters, and replaying the log through
``apply_ops`` reproduces the augmented image bit-exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

_BLUR_TRUNCATE = 3.0  # Gaussian kernel support in multiples of sigma
_BLUR_MODE = "nearest"


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; identical streams on every platform."""
    return np.random.Generator(np.random.PCG64(seed))


def split_rngs(seed: int, count: int) -> list[np.random.Generator]:
    """Independent per-item generators derived from one seed."""
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(count)]


def _range_pair(value, name):
    lo, hi = float(value[0]), float(value[1])
    if lo > hi:
        raise ValueError(f"{name} range must be ordered, got ({lo}, {hi})")
    return lo, hi


@dataclass(frozen=True)
class AugmentConfig:
    """Sampling ranges and probabilities for the augmentation suite.

    Color/blur/geometric/occlusion ops each fire with ``op_probability``;
    color ops additionally fire per channel with ``channel_probability``.
    Geometric scale and translation are relative to the image shape;
    occlusion is capped as a fraction of the object mask.
    """

    op_probability: float = 0.5
    channel_probability: float = 0.3
    add_range: tuple[float, float] = (-0.1, 0.1)
    contrast_range: tuple[float, float] = (0.4, 2.3)
    multiply_range: tuple[float, float] = (0.6, 1.4)
    invert_enabled: bool = True
    blur_sigma_range: tuple[float, float] = (0.0, 1.2)
    occlusion_fraction_max: float = 0.25
    scale_range: tuple[float, float] = (0.8, 1.2)
    translation_range: tuple[float, float] = (-0.15, 0.15)

    def __post_init__(self):
        for p, name in ((self.op_probability, "op"), (self.channel_probability, "channel")):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} probability must be in [0, 1]")
        for rng_value, name in (
            (self.add_range, "add"),
            (self.contrast_range, "contrast"),
            (self.multiply_range, "multiply"),
            (self.blur_sigma_range, "blur_sigma"),
            (self.scale_range, "scale"),
            (self.translation_range, "translation"),
        ):
            _range_pair(rng_value, name)
        if not 0.0 <= self.occlusion_fraction_max <= 1.0:
            raise ValueError("occlusion_fraction_max must be in [0, 1]")
        if self.blur_sigma_range[0] < 0.0:
            raise ValueError("blur sigma cannot be negative")
        if self.scale_range[0] <= 0.0:
            raise ValueError("scale must be positive")


_IDENTITY_CONFIG_KWARGS = dict(op_probability=0.0, channel_probability=0.0)


def identity_config() -> AugmentConfig:
    """Config under which augment() is the exact identity."""
    return AugmentConfig(**_IDENTITY_CONFIG_KWARGS)


# ---------------------------------------------------------------------------
# Single deterministic ops (replay targets)


def _op_add(image, value, channel):
    out = image.copy()
    target = out if channel is None else out[..., channel]
    np.add(target, value, out=target)
    return out


def _op_contrast(image, value, channel):
    out = image.copy()
    target = out if channel is None else out[..., channel]
    target -= 0.5
    target *= value
    target += 0.5
    return out


def _op_multiply(image, value, channel):
    out = image.copy()
    target = out if channel is None else out[..., channel]
    target *= value
    return out


def _op_invert(image, value, channel):
    out = image.copy()
    target = out if channel is None else out[..., channel]
    np.subtract(1.0, target, out=target)
    return out


def _op_blur(image, sigma):
    if sigma <= 0.0:
        return image.copy()
    sigmas = (sigma, sigma) + (0.0,) * (image.ndim - 2)
    return ndimage.gaussian_filter(image, sigma=sigmas, truncate=_BLUR_TRUNCATE, mode=_BLUR_MODE)


def _op_geometric(image, scale, tx, ty):
    """Scale about the image center then translate, nearest neighbor, zero fill."""
    height, width = image.shape[:2]
    cy, cx = height / 2.0, width / 2.0
    rows = np.arange(height) + 0.5
    cols = np.arange(width) + 0.5
    src_r = np.floor((rows - cy - ty * height) / scale + cy).astype(np.int64)
    src_c = np.floor((cols - cx - tx * width) / scale + cx).astype(np.int64)
    valid_r = (src_r >= 0) & (src_r < height)
    valid_c = (src_c >= 0) & (src_c < width)
    out = np.zeros_like(image)
    if valid_r.any() and valid_c.any():
        out[np.ix_(valid_r, valid_c)] = image[np.ix_(src_r[valid_r], src_c[valid_c])]
    return out


def _op_occlude_rect(image, x, y, w, h):
    out = image.copy()
    out[y : y + h, x : x + w] = 0.0
    return out


_OPS = {
    "add": lambda img, p: _op_add(img, p["value"], p["channel"]),
    "contrast": lambda img, p: _op_contrast(img, p["value"], p["channel"]),
    "multiply": lambda img, p: _op_multiply(img, p["value"], p["channel"]),
    "invert": lambda img, p: _op_invert(img, None, p["channel"]),
    "blur": lambda img, p: _op_blur(img, p["sigma"]),
    "geometric": lambda img, p: _op_geometric(img, p["scale"], p["tx"], p["ty"]),
    "occlude_rect": lambda img, p: _op_occlude_rect(img, p["x"], p["y"], p["w"], p["h"]),
    "clamp": lambda img, p: np.clip(img, 0.0, 1.0),
}


def apply_ops(image: np.ndarray, ops) -> np.ndarray:
    """Replay a log produced by augment(); bit-exact reproduction."""
    out = np.array(image)
    for op in ops:
        out = _OPS[op["op"]](out, op)
    return out


# ---------------------------------------------------------------------------
# Occlusion


def _mask_of(image) -> np.ndarray:
    if image.ndim == 2:
        return image != 0
    return (image != 0).any(axis=-1)


def _sample_occlusion_rect(mask: np.ndarray, fraction: float, rng) -> tuple[int, int, int, int] | None:
    """Rectangle whose intersection with the mask is at most fraction of it.

    Sampled around a random mask pixel with a random aspect ratio; resampled
    up to 10 times if the overlap budget is exceeded, then shrunk to fit.
    Returns None when even a single pixel would exceed the budget.
    """
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return None
    budget = int(math.floor(fraction * len(ys)))
    if budget < 1:
        return None
    height, width = mask.shape

    def overlap(x, y, w, h):
        return int(mask[y : y + h, x : x + w].sum())

    for _ in range(10):
        pick = rng.integers(0, len(ys))
        aspect = math.exp(rng.uniform(math.log(0.3), math.log(1.0 / 0.3)))
        area = max(1.0, fraction * len(ys))
        w = max(1, int(round(math.sqrt(area * aspect))))
        h = max(1, int(round(math.sqrt(area / aspect))))
        x = int(np.clip(xs[pick] - w // 2, 0, max(0, width - w)))
        y = int(np.clip(ys[pick] - h // 2, 0, max(0, height - h)))
        w = min(w, width - x)
        h = min(h, height - y)
        if overlap(x, y, w, h) <= budget:
            return (x, y, w, h)
    # Crop the last candidate until it fits the budget.
    while w > 1 or h > 1:
        if w >= h:
            w -= 1
        else:
            h -= 1
        if overlap(x, y, w, h) <= budget:
            return (x, y, w, h)
    return (x, y, 1, 1) if overlap(x, y, 1, 1) <= budget else None


def occlude(image: np.ndarray, mask: np.ndarray, fraction: float, rng) -> np.ndarray:
    """Zero a rectangle covering at most ``fraction`` of the mask area."""
    if not 0.0 <= fraction <= 0.25:
        raise ValueError("occlusion fraction must be in [0, 0.25]")
    if mask.shape != image.shape[:2]:
        raise ValueError("mask shape must match the image plane")
    rect = _sample_occlusion_rect(np.asarray(mask, bool), fraction, rng)
    if rect is None:
        return image.copy()
    return _op_occlude_rect(image, *rect)


# ---------------------------------------------------------------------------
# The full pipeline


def augment(image: np.ndarray, config: AugmentConfig, rng) -> tuple[np.ndarray, list[dict]]:
    """Apply the randomized suite to a float image in [0, 1].

    Returns the augmented image and the log of applied ops with their
    resolved parameters. With all probabilities zero this is the exact
    identity and the log is empty.
    """
    image = np.asarray(image)
    if image.size == 0 or float(image.min()) < 0.0 or float(image.max()) > 1.0:
        raise ValueError("augment expects a non-empty image with values in [0, 1]")
    channels = image.shape[2] if image.ndim == 3 else 0
    ops: list[dict] = []

    def color_op(name, sampler):
        if rng.random() < config.op_probability:
            ops.append({"op": name, "channel": None, **sampler()})
        for c in range(channels):
            if rng.random() < config.channel_probability:
                ops.append({"op": name, "channel": c, **sampler()})

    color_op("add", lambda: {"value": float(rng.uniform(*config.add_range))})
    color_op("contrast", lambda: {"value": float(rng.uniform(*config.contrast_range))})
    color_op("multiply", lambda: {"value": float(rng.uniform(*config.multiply_range))})
    if config.invert_enabled:
        color_op("invert", lambda: {})
    if rng.random() < config.op_probability:
        ops.append({"op": "blur", "sigma": float(rng.uniform(*config.blur_sigma_range))})
    if rng.random() < config.op_probability:
        ops.append(
            {
                "op": "geometric",
                "scale": float(rng.uniform(*config.scale_range)),
                "tx": float(rng.uniform(*config.translation_range)),
                "ty": float(rng.uniform(*config.translation_range)),
            }
        )
    occlusion_pending = rng.random() < config.op_probability and config.occlusion_fraction_max > 0.0

    out = apply_ops(image, ops)
    if occlusion_pending:
        fraction = float(rng.uniform(0.0, config.occlusion_fraction_max))
        rect = _sample_occlusion_rect(_mask_of(out), fraction, rng)
        if rect is not None:
            x, y, w, h = rect
            op = {"op": "occlude_rect", "x": x, "y": y, "w": w, "h": h}
            ops.append(op)
            out = _OPS["occlude_rect"](out, op)
    if ops:
        clamp = {"op": "clamp"}
        ops.append(clamp)
        out = _OPS["clamp"](out, clamp)
    return out, ops
