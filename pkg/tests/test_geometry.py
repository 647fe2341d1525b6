import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation as ScipyRotation

from conftest import random_rotation
from latentpose.errors import BehindCameraError
from latentpose.geometry import (
    CameraIntrinsics,
    Pose,
    check_rotation,
    geodesic_distance,
    inplane_rotations,
    project,
    rot_z,
    subdivide_icosahedron,
    viewpoint_to_rotation,
)


def _naive_subdivision_vertex_count(level):
    """Independent oracle: recursively split faces, counting unique vertices."""
    phi = (1 + math.sqrt(5)) / 2
    base = np.array(
        [
            (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
            (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
            (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
        ],
        dtype=float,
    )
    base /= np.linalg.norm(base, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    seen = set()

    def key(p):
        return tuple(round(c * 1e9) for c in p)

    def split(a, b, c, depth):
        for p in (a, b, c):
            seen.add(key(p))
        if depth == 0:
            return
        ab = (a + b) / 2
        bc = (b + c) / 2
        ca = (c + a) / 2
        ab, bc, ca = (m / np.linalg.norm(m) for m in (ab, bc, ca))
        split(a, ab, ca, depth - 1)
        split(ab, b, bc, depth - 1)
        split(ca, bc, c, depth - 1)
        split(ab, bc, ca, depth - 1)

    for i, j, k in faces:
        split(base[i], base[j], base[k], level)
    return len(seen)


class TestSubdivideIcosahedron:
    def test_base_icosahedron_has_12_vertices(self):
        assert len(subdivide_icosahedron(0)) == 12

    def test_level_4_matches_published_viewpoint_count(self):
        assert len(subdivide_icosahedron(4)) == 2562

    def test_level_2_count_against_recursive_oracle(self):
        # 10 * 4**2 + 2 cross-checked by counting unique midpoint vertices.
        assert _naive_subdivision_vertex_count(2) == 162
        assert len(subdivide_icosahedron(2)) == 162

    @pytest.mark.parametrize("level", range(6))
    def test_count_formula(self, level):
        assert len(subdivide_icosahedron(level)) == 10 * 4**level + 2

    def test_viewpoints_are_unit_and_distinct(self):
        sphere = subdivide_icosahedron(3)
        norms = np.linalg.norm(sphere.viewpoints, axis=1)
        assert np.abs(norms - 1.0).max() <= 1e-9
        assert len(np.unique(np.round(sphere.viewpoints, 6), axis=0)) == len(sphere)

    def test_levels_nest(self):
        coarse = subdivide_icosahedron(2)
        fine = subdivide_icosahedron(3)
        assert np.array_equal(coarse.viewpoints, fine.viewpoints[: len(coarse)])

    @pytest.mark.parametrize("level", [-1, 7])
    def test_level_out_of_range(self, level):
        with pytest.raises(ValueError):
            subdivide_icosahedron(level)


class TestViewpointToRotation:
    def test_frontal_view_third_row(self):
        rotation = viewpoint_to_rotation(np.array([0.0, 0.0, 1.0]), up_hint=(0.0, 1.0, 0.0))
        check_rotation(rotation)
        np.testing.assert_allclose(rotation[2], [0.0, 0.0, -1.0], atol=1e-12)

    def test_antipodal_viewpoint_uses_fallback_and_stays_valid(self):
        rotation = viewpoint_to_rotation(np.array([0.0, 0.0, -1.0]))
        check_rotation(rotation)

    def test_parallel_up_hint_falls_back(self):
        rotation = viewpoint_to_rotation(np.array([0.0, 1.0, 0.0]), up_hint=(0.0, 1.0, 0.0))
        check_rotation(rotation)

    def test_viewpoint_maps_to_negative_z(self):
        v = np.array([1.0, 0.0, 0.0])
        rotation = viewpoint_to_rotation(v)
        np.testing.assert_allclose(rotation.T @ v, [0.0, 0.0, -1.0], atol=1e-12)

    def test_all_sphere_rotations_valid(self):
        for v in subdivide_icosahedron(1).viewpoints:
            check_rotation(viewpoint_to_rotation(v))


class TestInplaneRotations:
    def test_36_steps_are_10_degrees_apart(self):
        rotations = inplane_rotations(36)
        assert len(rotations) == 36
        for a, b in zip(rotations, rotations[1:]):
            assert geodesic_distance(a, b) == pytest.approx(math.radians(10.0), abs=1e-12)

    def test_single_step_is_identity(self):
        (only,) = inplane_rotations(1)
        np.testing.assert_array_equal(only, np.eye(3))

    def test_quarter_turn_maps_x_to_y(self):
        quarter = inplane_rotations(4)[1]
        np.testing.assert_allclose(quarter @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-12)

    def test_zero_steps_rejected(self):
        with pytest.raises(ValueError):
            inplane_rotations(0)


class TestGeodesicDistance:
    def test_identity_distance_zero(self):
        assert geodesic_distance(np.eye(3), np.eye(3)) == 0.0

    def test_quarter_turn(self):
        assert geodesic_distance(np.eye(3), rot_z(math.pi / 2)) == pytest.approx(math.pi / 2, abs=1e-12)

    def test_random_pairs_match_quaternion_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            a = random_rotation(rng)
            b = random_rotation(rng)
            oracle = ScipyRotation.from_matrix(a.T @ b).magnitude()
            assert geodesic_distance(a, b) == pytest.approx(oracle, abs=1e-9)

    def test_symmetric_and_bounded(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            a, b = random_rotation(rng), random_rotation(rng)
            d = geodesic_distance(a, b)
            assert d == pytest.approx(geodesic_distance(b, a), abs=1e-12)
            assert 0.0 <= d <= math.pi


class TestProject:
    def test_optical_axis_hits_principal_point(self, camera):
        np.testing.assert_allclose(project(camera, [0.0, 0.0, 1000.0]), [32.0, 32.0])

    def test_similar_triangles(self):
        camera = CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)
        np.testing.assert_allclose(project(camera, [100.0, 0.0, 1000.0]), [370.0, 240.0])

    def test_batch_matches_homogeneous_matrix_oracle(self, camera):
        rng = np.random.default_rng(3)
        points = rng.uniform([-200, -200, 500], [200, 200, 2000], size=(100, 3))
        homogeneous = (camera.matrix() @ points.T).T
        oracle = homogeneous[:, :2] / homogeneous[:, 2:3]
        np.testing.assert_allclose(project(camera, points), oracle, atol=1e-9)

    def test_non_positive_depth_rejected(self, camera):
        with pytest.raises(BehindCameraError):
            project(camera, [0.0, 0.0, -5.0])
        with pytest.raises(BehindCameraError):
            project(camera, [[0.0, 0.0, 10.0], [0.0, 0.0, 0.0]])


class TestPoseAndIntrinsics:
    def test_pose_validates_rotation(self):
        with pytest.raises(ValueError):
            Pose(np.eye(3) * 1.001, [0, 0, 0])

    def test_pose_rejects_reflection(self):
        reflection = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            Pose(reflection, [0, 0, 0])

    def test_pose_inverse_roundtrip(self):
        rng = np.random.default_rng(5)
        pose = Pose(random_rotation(rng), rng.normal(size=3) * 100)
        points = rng.normal(size=(10, 3)) * 50
        np.testing.assert_allclose(pose.inverse().transform(pose.transform(points)), points, atol=1e-9)

    def test_pose_is_immutable(self, frontal_pose):
        with pytest.raises(ValueError):
            frontal_pose.rotation[0, 0] = 2.0

    def test_intrinsics_validation(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=-1.0, fy=1.0, cx=0.0, cy=0.0, width=10, height=10)
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=1.0, fy=1.0, cx=20.0, cy=0.0, width=10, height=10)
