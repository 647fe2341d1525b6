import numpy as np
import pytest

from latentpose.geometry import CameraIntrinsics, Pose
from latentpose.render import TriangleMesh

# Cube corners indexed by bit pattern (x * 4 + y * 2 + z); each face quad is
# split into two triangles.
_CUBE_QUADS = (
    (0, 1, 3, 2),
    (4, 6, 7, 5),
    (0, 4, 5, 1),
    (2, 3, 7, 6),
    (0, 2, 6, 4),
    (1, 5, 7, 3),
)


def make_cube(side=100.0):
    h = side / 2.0
    vertices = np.array([[x, y, z] for x in (-h, h) for y in (-h, h) for z in (-h, h)])
    triangles = []
    for a, b, c, d in _CUBE_QUADS:
        triangles += [(a, b, c), (a, c, d)]
    return TriangleMesh(vertices, np.array(triangles))


def make_tetrahedron(scale=40.0):
    vertices = np.array([[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]]) * scale
    return TriangleMesh(vertices, np.array([[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]]))


def random_rotation(rng):
    """Uniform random rotation via QR of a Gaussian matrix (test oracle helper)."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture
def cube():
    return make_cube()


@pytest.fixture
def tetrahedron():
    return make_tetrahedron()


@pytest.fixture
def camera():
    return CameraIntrinsics(fx=200.0, fy=200.0, cx=32.0, cy=32.0, width=64, height=64)


@pytest.fixture
def frontal_pose():
    return Pose(np.eye(3), [0.0, 0.0, 1000.0])
