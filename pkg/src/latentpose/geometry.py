"""Rotations, pinhole cameras, and icosphere view sampling.

Conventions used throughout the package: right-handed frames, camera +z
pointing into the scene, image origin at the top-left corner with y down,
pixel centers at half-integer coordinates. Rotations are plain 3x3 numpy
arrays (row-major); translations are in millimetres.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError

ROTATION_TOL = 1e-9

# Regular icosahedron from the golden-ratio rectangle construction.
_PHI = (1.0 + math.sqrt(5.0)) / 2.0
_ICO_VERTICES = np.array(
    [
        (-1.0, _PHI, 0.0),
        (1.0, _PHI, 0.0),
        (-1.0, -_PHI, 0.0),
        (1.0, -_PHI, 0.0),
        (0.0, -1.0, _PHI),
        (0.0, 1.0, _PHI),
        (0.0, -1.0, -_PHI),
        (0.0, 1.0, -_PHI),
        (_PHI, 0.0, -1.0),
        (_PHI, 0.0, 1.0),
        (-_PHI, 0.0, -1.0),
        (-_PHI, 0.0, 1.0),
    ]
)
_ICO_FACES = (
    (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
    (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
    (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
    (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
)

MAX_SUBDIVISION_LEVEL = 6

# Grid used to deduplicate subdivision vertices: two vertices are the same
# point iff they quantize to the same cell.
_DEDUP_GRID = 1e-9


def check_rotation(matrix: np.ndarray, tol: float = ROTATION_TOL) -> None:
    """Raise ValueError unless ``matrix`` is a proper rotation within ``tol``."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("rotation contains non-finite entries")
    err = np.abs(m.T @ m - np.eye(3)).max()
    if err > tol:
        raise ValueError(f"matrix is not orthonormal (max deviation {err:.3e})")
    det = np.linalg.det(m)
    if abs(det - 1.0) > tol:
        raise ValueError(f"matrix determinant is {det:.12f}, expected +1")


def rot_x(angle: float) -> np.ndarray:
    """Rotation about the x axis by ``angle`` radians."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([(1.0, 0.0, 0.0), (0.0, c, -s), (0.0, s, c)])


def rot_y(angle: float) -> np.ndarray:
    """Rotation about the y axis by ``angle`` radians."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([(c, 0.0, s), (0.0, 1.0, 0.0), (-s, 0.0, c)])


def rot_z(angle: float) -> np.ndarray:
    """Rotation about the z axis by ``angle`` radians."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([(c, -s, 0.0), (s, c, 0.0), (0.0, 0.0, 1.0)])


def exp_so3(omega: np.ndarray) -> np.ndarray:
    """Matrix exponential of the skew form of ``omega`` (Rodrigues formula)."""
    w = np.asarray(omega, dtype=np.float64)
    theta = float(np.linalg.norm(w))
    k = np.array(
        [
            (0.0, -w[2], w[1]),
            (w[2], 0.0, -w[0]),
            (-w[1], w[0], 0.0),
        ]
    )
    if theta < 1e-12:
        # Second-order series keeps the result orthonormal to machine precision.
        return np.eye(3) + k + 0.5 * (k @ k)
    return np.eye(3) + (math.sin(theta) / theta) * k + ((1.0 - math.cos(theta)) / theta**2) * (k @ k)


def orthonormalize(matrix: np.ndarray) -> np.ndarray:
    """Project a near-rotation onto the closest proper rotation (SVD)."""
    u, _, vt = np.linalg.svd(np.asarray(matrix, dtype=np.float64))
    r = u @ vt
    if np.linalg.det(r) < 0.0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


def geodesic_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Angle in radians between two rotations, in [0, pi]."""
    check_rotation(a)
    check_rotation(b)
    c = (np.trace(a.T @ b) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, c)))


def _freeze(obj, name, array):
    array.setflags(write=False)
    object.__setattr__(obj, name, array)


@dataclass(frozen=True)
class Pose:
    """Rigid transform from object to camera coordinates (mm)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        check_rotation(r)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation contains non-finite entries")
        _freeze(self, "rotation", r)
        _freeze(self, "translation", t)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous transform."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply the transform to one point or an (n, 3) array of points."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0.0 <= self.cx < self.width and 0.0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array(
            [
                (self.fx, 0.0, self.cx),
                (0.0, self.fy, self.cy),
                (0.0, 0.0, 1.0),
            ]
        )


def project(camera: CameraIntrinsics, points: np.ndarray) -> np.ndarray:
    """Project camera-frame points (mm) to pixel coordinates.

    Accepts a single 3-vector or an (n, 3) array; raises BehindCameraError
    if any point has z <= 0.
    """
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    if np.any(p[:, 2] <= 0.0):
        raise BehindCameraError("cannot project points with non-positive depth")
    uv = np.empty((p.shape[0], 2))
    uv[:, 0] = camera.fx * p[:, 0] / p[:, 2] + camera.cx
    uv[:, 1] = camera.fy * p[:, 1] / p[:, 2] + camera.cy
    return uv[0] if single else uv


@dataclass(frozen=True)
class ViewSphere:
    """Unit viewpoints from a subdivided icosahedron."""

    subdivision_level: int
    viewpoints: np.ndarray

    def __post_init__(self):
        v = np.array(self.viewpoints, dtype=np.float64)
        expected = 10 * 4**self.subdivision_level + 2
        if v.shape != (expected, 3):
            raise ValueError(
                f"level {self.subdivision_level} requires {expected} viewpoints, got {v.shape}"
            )
        norms = np.linalg.norm(v, axis=1)
        if np.abs(norms - 1.0).max() > ROTATION_TOL:
            raise ValueError("viewpoints must be unit vectors")
        keys = {_quantize_key(p) for p in v}
        if len(keys) != len(v):
            raise ValueError("viewpoints must be pairwise distinct")
        _freeze(self, "viewpoints", v)

    def __len__(self) -> int:
        return self.viewpoints.shape[0]


def _quantize_key(vertex):
    return tuple(int(round(c / _DEDUP_GRID)) for c in vertex)


def subdivide_icosahedron(level: int) -> ViewSphere:
    """Subdivide the unit icosahedron ``level`` times (10*4^level + 2 vertices).

    Each pass splits every triangle at its edge midpoints; midpoints are
    re-normalized onto the sphere and deduplicated on a 1e-9 grid, so vertex
    ordering is reproducible and level-n vertices prefix the level-(n+1) set.
    """
    if not 0 <= level <= MAX_SUBDIVISION_LEVEL:
        raise ValueError(f"subdivision level must be in [0, {MAX_SUBDIVISION_LEVEL}], got {level}")
    vertices = [v / np.linalg.norm(v) for v in _ICO_VERTICES]
    faces = list(_ICO_FACES)
    for _ in range(level):
        lookup = {_quantize_key(v): i for i, v in enumerate(vertices)}

        def midpoint(i, j):
            m = (vertices[i] + vertices[j]) / 2.0
            m = m / np.linalg.norm(m)
            key = _quantize_key(m)
            idx = lookup.get(key)
            if idx is None:
                idx = len(vertices)
                vertices.append(m)
                lookup[key] = idx
            return idx

        split = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            split += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
        faces = split
    return ViewSphere(level, np.array(vertices))


_FALLBACK_UPS = (np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]))


def viewpoint_to_rotation(viewpoint: np.ndarray, up_hint=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Camera-to-world rotation for a camera on ray ``viewpoint`` looking at the origin.

    The camera z axis is -viewpoint and its y axis is the projection of
    ``up_hint`` onto the image plane. If ``up_hint`` is (anti)parallel to the
    viewpoint, the first usable fallback of (0, 0, 1) then (1, 0, 0) is
    substituted, so the result is always a valid rotation.
    """
    v = np.asarray(viewpoint, dtype=np.float64)
    if abs(np.linalg.norm(v) - 1.0) > 1e-6:
        raise ValueError("viewpoint must be a unit vector")
    z_cam = -v
    candidates = (np.asarray(up_hint, dtype=np.float64),) + _FALLBACK_UPS
    for up in candidates:
        y = up - (up @ z_cam) * z_cam
        norm = np.linalg.norm(y)
        if norm > 1e-9:
            y_cam = y / norm
            x_cam = np.cross(y_cam, z_cam)
            return np.column_stack([x_cam, y_cam, z_cam])
    raise ValueError("no usable up vector found")  # pragma: no cover


def inplane_rotations(count: int) -> list[np.ndarray]:
    """Rotations about the camera z axis at angles 2*pi*k/count, k = 0..count-1."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return [rot_z(2.0 * math.pi * k / count) for k in range(count)]
