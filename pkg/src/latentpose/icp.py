"""Depth-based pose refinement: point-to-plane ICP with adaptive thresholding.

Refinement is staged as in the RGB pipeline: a 1-DoF search along the
camera-to-object ray absorbs the dominant distance error first, then the
full 6-DoF point-to-plane solve polishes the pose. Correspondences run from
the (posed) model sample to the scene cloud, using scene normals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateGeometryError,
    InsufficientDataError,
    InsufficientOverlapError,
    NoOverlapError,
)
from .geometry import CameraIntrinsics, Pose, exp_so3, orthonormalize
from .render import DepthImage


@dataclass(frozen=True)
class PointCloud:
    """3D points in mm with optional unit normals."""

    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        p = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", p)
        p.setflags(write=False)
        if self.normals is not None:
            n = np.array(self.normals, dtype=np.float64).reshape(-1, 3)
            if n.shape != p.shape:
                raise ValueError("normals must match points one-to-one")
            lengths = np.linalg.norm(n, axis=1)
            if len(n) and np.abs(lengths - 1.0).max() > 1e-6:
                raise ValueError("normals must be unit length")
            n.setflags(write=False)
            object.__setattr__(self, "normals", n)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class IcpConfig:
    """Iteration limits and the adaptive correspondence threshold schedule."""

    max_iterations: int = 50
    initial_threshold: float | None = None  # None: 3x the scene median spacing
    threshold_decay: float = 0.9
    min_correspondences: int = 6
    convergence_eps: float = 0.1  # mm

    def __post_init__(self):
        if self.max_iterations < 1 or self.min_correspondences < 1:
            raise ValueError("iteration and correspondence minimums must be positive")
        if self.initial_threshold is not None and self.initial_threshold <= 0.0:
            raise ValueError("initial_threshold must be positive")
        if not 0.0 < self.threshold_decay <= 1.0:
            raise ValueError("threshold_decay must be in (0, 1]")
        if self.convergence_eps <= 0.0:
            raise ValueError("convergence_eps must be positive")


@dataclass(frozen=True)
class IcpStats:
    iterations: int
    final_residual: float
    correspondences: int
    residuals: tuple[float, ...]


def backproject(depth: DepthImage, camera: CameraIntrinsics) -> PointCloud:
    """Lift every nonzero depth pixel to a camera-frame point (pixel centers)."""
    rows, cols = np.nonzero(depth.data > 0)
    z = depth.data[rows, cols].astype(np.float64)
    u = cols + 0.5
    v = rows + 0.5
    points = np.column_stack([(u - camera.cx) * z / camera.fx, (v - camera.cy) * z / camera.fy, z])
    return PointCloud(points)


def estimate_normals(cloud: PointCloud, k_neighbors: int = 12) -> PointCloud:
    """Per-point normals from the local covariance, oriented toward the camera.

    The normal is the smallest-eigenvalue direction of the covariance of the
    k nearest neighbors (the point itself included). Points whose
    neighborhood is degenerate (collinear or coincident) are excluded from
    the returned cloud.
    """
    pts = cloud.points
    if len(pts) < k_neighbors:
        raise InsufficientDataError(f"need at least {k_neighbors} points, have {len(pts)}")
    _, idx = cKDTree(pts).query(pts, k=k_neighbors)
    hoods = pts[idx]
    centered = hoods - hoods.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    eigvals, eigvecs = np.linalg.eigh(cov)
    normals = eigvecs[:, :, 0]
    # A usable neighborhood needs two spread directions: the middle
    # eigenvalue must not vanish relative to the largest.
    valid = eigvals[:, 1] > 1e-9 * np.maximum(eigvals[:, 2], 1e-300)
    flip = normals[:, 2] > 0
    normals[flip] = -normals[flip]
    lengths = np.linalg.norm(normals, axis=1)
    normals /= lengths[:, None]
    return PointCloud(pts[valid], normals[valid])


def _median_spacing(points: np.ndarray, sample: int = 2000) -> float:
    step = max(1, len(points) // sample)
    probe = points[::step]
    d, _ = cKDTree(points).query(probe, k=2)
    spacing = float(np.median(d[:, 1]))
    return spacing if spacing > 0 else 1.0


def _plane_residuals(posed, scene, tree, threshold):
    distances, index = tree.query(posed)
    selected = distances <= threshold
    q = scene.points[index[selected]]
    n = scene.normals[index[selected]]
    residuals = np.einsum("ij,ij->i", n, q - posed[selected])
    return selected, q, n, residuals


def icp_refine_z(
    model: PointCloud,
    scene: PointCloud,
    init: Pose,
    max_offset: float = 100.0,
    threshold: float | None = None,
) -> Pose:
    """1-DoF refinement along the camera-to-object ray; rotation unchanged.

    Minimizes the median absolute point-to-plane residual over a coarse grid
    of ray offsets, then over a fine grid around the coarse optimum. Offsets
    without any correspondence inside the threshold are infeasible; if all
    offsets are infeasible, NoOverlapError is raised.
    """
    if len(model) == 0 or len(scene) == 0:
        raise NoOverlapError("model and scene clouds must be non-empty")
    if scene.normals is None:
        raise ValueError("scene cloud must carry normals (see estimate_normals)")
    tz = init.translation[2]
    if tz <= 0.0:
        raise ValueError("initial translation must have positive depth")
    ray = init.translation / np.linalg.norm(init.translation)
    if threshold is None:
        threshold = 3.0 * _median_spacing(scene.points)
    posed = model.points @ init.rotation.T + init.translation
    tree = cKDTree(scene.points)

    def cost(offset: float) -> float:
        selected, _, _, residuals = _plane_residuals(posed + offset * ray, scene, tree, threshold)
        if not selected.any():
            return math.inf
        return float(np.median(np.abs(residuals)))

    def search(offsets):
        costs = np.array([cost(s) for s in offsets])
        if not np.isfinite(costs).any():
            return None
        order = np.lexsort((np.abs(offsets), costs))  # ties prefer the smaller move
        return float(offsets[order[0]])

    coarse = search(np.arange(-max_offset, max_offset + 1e-9, 2.0))
    if coarse is None:
        raise NoOverlapError("no correspondences within threshold along the search ray")
    fine = search(coarse + np.arange(-2.0, 2.0 + 1e-9, 0.1))
    best = coarse if fine is None else fine
    return Pose(init.rotation, init.translation + best * ray)


def icp_refine(
    model: PointCloud,
    scene: PointCloud,
    init: Pose,
    config: IcpConfig = IcpConfig(),
) -> tuple[Pose, IcpStats]:
    """Full 6-DoF point-to-plane refinement with a decaying match threshold.

    Each iteration matches posed model points to their scene nearest
    neighbors within the current threshold, solves the linearized
    point-to-plane normal equations for an incremental twist, applies it
    with an exact rotation exponential, and shrinks the threshold. Stops
    when the maximum point motion falls below ``convergence_eps``.
    """
    if len(model) == 0 or len(scene) == 0:
        raise NoOverlapError("model and scene clouds must be non-empty")
    if scene.normals is None:
        raise ValueError("scene cloud must carry normals (see estimate_normals)")
    rotation = init.rotation.copy()
    translation = init.translation.copy()
    threshold = config.initial_threshold
    if threshold is None:
        threshold = 3.0 * _median_spacing(scene.points)
    tree = cKDTree(scene.points)
    residual_log = []
    correspondences = 0
    iterations = 0
    for iteration in range(config.max_iterations):
        iterations = iteration + 1
        posed = model.points @ rotation.T + translation
        selected, _, normals, residuals = _plane_residuals(posed, scene, tree, threshold)
        correspondences = int(selected.sum())
        if correspondences < config.min_correspondences:
            raise InsufficientOverlapError(
                f"only {correspondences} correspondences within {threshold:.3f} mm",
                iteration=iteration,
            )
        residual_log.append(float(np.median(np.abs(residuals))))
        p = posed[selected]
        a = np.hstack([np.cross(p, normals), normals])
        ata = a.T @ a
        atb = a.T @ residuals
        if not np.all(np.isfinite(ata)):
            raise DegenerateGeometryError("normal equations contain non-finite entries")
        eigvals, eigvecs = np.linalg.eigh(ata)
        top = eigvals[-1]
        if top <= 0.0:
            raise DegenerateGeometryError("normal equations have rank zero")
        # Pseudo-inverse with a relative cutoff: motion along unconstrained
        # directions (e.g. a surface-of-revolution axis) is left at zero.
        usable = eigvals > 1e-12 * top
        inv = np.where(usable, 1.0 / np.where(usable, eigvals, 1.0), 0.0)
        twist = eigvecs @ (inv * (eigvecs.T @ atb))
        omega, v = twist[:3], twist[3:]
        increment = exp_so3(omega)
        rotation = orthonormalize(increment @ rotation)
        translation = increment @ translation + v
        step = float(np.linalg.norm(np.cross(np.broadcast_to(omega, p.shape), p) + v, axis=1).max())
        threshold = max(threshold * config.threshold_decay, config.convergence_eps)
        if step < config.convergence_eps:
            break
    posed = model.points @ rotation.T + translation
    selected, _, _, residuals = _plane_residuals(posed, scene, tree, threshold)
    final_residual = float(np.median(np.abs(residuals))) if selected.any() else math.inf
    return Pose(rotation, translation), IcpStats(
        iterations=iterations,
        final_residual=final_residual,
        correspondences=correspondences,
        residuals=tuple(residual_log),
    )
