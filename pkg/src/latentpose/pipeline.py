"""From a 2D detection plus a codebook hit to a full 6D pose.

Implements the square crop with padding, the projective distance estimate
from bounding-box diagonal ratios, the translation estimate from bbox
centers, and the perspective correction of the orientation for off-center
objects.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .codebook import Codebook, knn_query
from .errors import BehindCameraError
from .geometry import CameraIntrinsics, Pose, orthonormalize, rot_x, rot_y


@dataclass(frozen=True)
class Detection:
    """2D detector output: pixel bbox (x, y, w, h), object id, and score."""

    bbox: tuple[float, float, float, float]
    object_id: str | int = 0
    score: float = 1.0

    def __post_init__(self):
        x, y, w, h = self.bbox
        if w <= 0 or h <= 0:
            raise ValueError(f"detection bbox must have positive size, got {self.bbox}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score must be in [0, 1], got {self.score}")

    @property
    def center(self) -> tuple[float, float]:
        x, y, w, h = self.bbox
        return (x + w / 2.0, y + h / 2.0)

    @property
    def diag(self) -> float:
        _, _, w, h = self.bbox
        return math.hypot(w, h)


@dataclass(frozen=True)
class DistanceContext:
    """Camera pair and synthetic rendering distance for Eq.-5 style estimates."""

    k_syn: CameraIntrinsics
    k_real: CameraIntrinsics
    t_syn_z: float = 700.0

    def __post_init__(self):
        if self.t_syn_z <= 0.0:
            raise ValueError("t_syn_z must be positive")


def square_crop(image: np.ndarray, bbox, padding: float = 1.2, out_size: int = 128) -> np.ndarray:
    """Square crop centered on the bbox, nearest-neighbor resized to out_size.

    The crop side is max(w, h) * padding; pixels outside the image are black.
    Works on (H, W) and (H, W, C) arrays and preserves dtype.
    """
    if padding < 1.0:
        raise ValueError("padding must be >= 1")
    if out_size < 1:
        raise ValueError("out_size must be positive")
    x, y, w, h = bbox
    if w <= 0 or h <= 0:
        raise ValueError(f"degenerate bbox {bbox}")
    side = max(w, h) * padding
    left = x + w / 2.0 - side / 2.0
    top = y + h / 2.0 - side / 2.0
    scale = side / out_size
    cols = np.floor(left + (np.arange(out_size) + 0.5) * scale).astype(np.int64)
    rows = np.floor(top + (np.arange(out_size) + 0.5) * scale).astype(np.int64)
    in_h, in_w = image.shape[:2]
    # Valid source rows/cols form contiguous runs, so slices suffice.
    rv = np.flatnonzero((rows >= 0) & (rows < in_h))
    cv = np.flatnonzero((cols >= 0) & (cols < in_w))
    out_shape = (out_size, out_size) + image.shape[2:]
    out = np.zeros(out_shape, dtype=image.dtype)
    if len(rv) and len(cv):
        r0, r1 = int(rv[0]), int(rv[-1]) + 1
        c0, c1 = int(cv[0]), int(cv[-1]) + 1
        out[r0:r1, c0:c1] = image[rows[r0:r1, None], cols[c0:c1]]
    return out


def _scalar_focal(camera: CameraIntrinsics) -> float:
    # Single focal length used by the pinhole ratio: geometric mean of fx, fy,
    # exact for square pixels and symmetric in the two axes.
    return math.sqrt(camera.fx * camera.fy)


def estimate_distance(ctx: DistanceContext, bb_real_diag: float, bb_syn_diag: float) -> float:
    """Pinhole distance estimate from the synthetic/real bbox diagonal ratio."""
    if bb_real_diag <= 0.0 or bb_syn_diag <= 0.0:
        raise ValueError("bbox diagonals must be positive")
    return ctx.t_syn_z * (bb_syn_diag / bb_real_diag) * (_scalar_focal(ctx.k_real) / _scalar_focal(ctx.k_syn))


def _unproject(camera: CameraIntrinsics, center) -> np.ndarray:
    # K^-1 @ [cx, cy, 1] in closed form.
    return np.array([(center[0] - camera.cx) / camera.fx, (center[1] - camera.cy) / camera.fy, 1.0])


def estimate_translation(ctx: DistanceContext, t_real_z: float, bb_real_center, bb_syn_center) -> np.ndarray:
    """Full 3D translation from the estimated depth and both bbox centers.

    delta = t_real_z * K_real^-1 [c_real; 1] - t_syn_z * K_syn^-1 [c_syn; 1],
    added to the synthetic translation (0, 0, t_syn_z). The z component
    equals t_real_z up to rounding.
    """
    if t_real_z <= 0.0:
        raise BehindCameraError("estimated depth must be positive")
    delta = t_real_z * _unproject(ctx.k_real, bb_real_center) - ctx.t_syn_z * _unproject(ctx.k_syn, bb_syn_center)
    return np.array([0.0, 0.0, ctx.t_syn_z]) + delta


def perspective_correction(rotation_prime: np.ndarray, t_real: np.ndarray) -> np.ndarray:
    """Correct a codebook orientation for the object's off-center position.

    Rotates by the angles under which the estimated translation is seen from
    the optical axis: alpha_x = -atan(ty/tz), alpha_y = atan(tx/hypot(tz, ty)),
    applied as R_y(alpha_y) @ R_x(alpha_x) @ rotation_prime.
    """
    t = np.asarray(t_real, dtype=np.float64)
    if t[2] <= 0.0:
        raise BehindCameraError("translation must have positive depth")
    alpha_x = -math.atan2(t[1], t[2])
    alpha_y = math.atan2(t[0], math.hypot(t[2], t[1]))
    if alpha_x == 0.0 and alpha_y == 0.0:
        return np.array(rotation_prime, dtype=np.float64)
    return rot_y(alpha_y) @ rot_x(alpha_x) @ np.asarray(rotation_prime, dtype=np.float64)


@dataclass(frozen=True)
class PoseEstimate:
    """Estimated pose plus lookup diagnostics."""

    pose: Pose
    similarity: float
    neighbors: tuple[tuple[int, float], ...]
    rotation_uncorrected: np.ndarray
    distance: float


def estimate_pose_from_code(
    code,
    detection: Detection,
    codebook: Codebook,
    ctx: DistanceContext,
    k: int = 1,
) -> PoseEstimate:
    """Assemble a pose from an already-computed latent code.

    The pose uses the single best codebook hit; further neighbors (k > 1) are
    reported as diagnostics only.
    """
    _check_detection_extent(detection, ctx.k_real)
    hits = knn_query(codebook, code, k)
    best_index, best_sim = hits[0]
    entry = codebook.entry(best_index)
    # Codebook rotations are stored in float32; lift back onto SO(3) before
    # composing, and convert camera-to-object to object-to-camera.
    rotation_prime = orthonormalize(entry.rotation.astype(np.float64).T)
    t_z = estimate_distance(ctx, detection.diag, entry.bbox_diag)
    translation = estimate_translation(ctx, t_z, detection.center, entry.bbox_center)
    rotation = perspective_correction(rotation_prime, translation)
    return PoseEstimate(
        pose=Pose(rotation, translation),
        similarity=best_sim,
        neighbors=tuple(hits),
        rotation_uncorrected=rotation_prime,
        distance=t_z,
    )


def estimate_pose(
    image: np.ndarray,
    detection: Detection,
    encode,
    codebook: Codebook,
    ctx: DistanceContext,
    k: int = 1,
    padding: float = 1.2,
    crop_size: int = 128,
) -> PoseEstimate:
    """Run the full per-detection pipeline; deterministic given its inputs.

    Composition: square crop around the detection, encode, codebook kNN,
    projective distance, translation, perspective correction.
    """
    _check_detection_extent(detection, ctx.k_real)
    crop = square_crop(image, detection.bbox, padding=padding, out_size=crop_size)
    return estimate_pose_from_code(encode(crop), detection, codebook, ctx, k=k)


def cropped_codebook_views(views, padding: float = 1.2, crop_size: int = 128):
    """Crop rendered views around their silhouette the way test crops are made.

    Feeding these into build_codebook makes codebook codes directly
    comparable with codes of detection crops: both are scale-normalized
    square crops with the same padding. The stored bbox stays the original
    silhouette box in synthetic-camera pixels.
    """
    for image, rotation, bbox in views:
        pixels = getattr(image, "data", image)
        if bbox is None:
            yield pixels, rotation, None
        else:
            yield square_crop(pixels, bbox, padding=padding, out_size=crop_size), rotation, bbox


def _check_detection_extent(detection: Detection, camera: CameraIntrinsics) -> None:
    # Clipped detections are fine, but a bbox may overhang the image by at
    # most 50% of the image size per side.
    x, y, w, h = detection.bbox
    lim_x, lim_y = 0.5 * camera.width, 0.5 * camera.height
    if x < -lim_x or y < -lim_y or x + w > camera.width + lim_x or y + h > camera.height + lim_y:
        raise ValueError(f"detection bbox {detection.bbox} extends beyond the 50% image margin")
