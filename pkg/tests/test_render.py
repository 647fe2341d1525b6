import math

import numpy as np
import pytest

from conftest import make_cube, random_rotation
from latentpose.errors import MeshParseError
from latentpose.geometry import CameraIntrinsics, Pose, geodesic_distance, rot_z, subdivide_icosahedron
from latentpose.render import (
    DepthImage,
    TriangleMesh,
    generate_codebook_views,
    load_depth,
    load_mesh,
    render_depth,
    sample_surface,
    save_depth,
    silhouette_bbox,
)

CUBE_OBJ = """\
v -50 -50 -50
v -50 -50 50
v -50 50 -50
v -50 50 50
v 50 -50 -50
v 50 -50 50
v 50 50 -50
v 50 50 50
f 1 2 4 3
f 5 7 8 6
f 1 5 6 2
f 3 4 8 7
f 1 3 7 5
f 2 6 8 4
"""

TRIANGLE_PLY = """\
ply
format ascii 1.0
element vertex 4
property float x
property float y
property float z
element face 1
property list uchar int vertex_indices
end_header
0 0 0
10 0 0
0 10 0
10 10 0
4 0 1 3 2
"""


def ray_cast_depth(mesh, pose, camera, pixel_x, pixel_y):
    """Independent depth oracle: Moller-Trumbore over every triangle."""
    origin = np.zeros(3)
    direction = np.array([(pixel_x + 0.5 - camera.cx) / camera.fx, (pixel_y + 0.5 - camera.cy) / camera.fy, 1.0])
    vertices = pose.transform(mesh.vertices)
    best = math.inf
    for i0, i1, i2 in mesh.triangles:
        v0, v1, v2 = vertices[i0], vertices[i1], vertices[i2]
        e1, e2 = v1 - v0, v2 - v0
        p = np.cross(direction, e2)
        det = e1 @ p
        if abs(det) < 1e-12:
            continue
        inv = 1.0 / det
        s = origin - v0
        u = (s @ p) * inv
        if u < -1e-12 or u > 1 + 1e-12:
            continue
        q = np.cross(s, e1)
        v = (direction @ q) * inv
        if v < -1e-12 or u + v > 1 + 1e-12:
            continue
        t = (e2 @ q) * inv
        if t > 0:
            best = min(best, t)  # direction has unit z, so t is the depth
    return 0.0 if math.isinf(best) else best


class TestLoadMesh:
    def test_cube_obj(self, tmp_path):
        path = tmp_path / "cube.obj"
        path.write_text(CUBE_OBJ)
        mesh = load_mesh(path)
        assert len(mesh.vertices) == 8
        assert len(mesh.triangles) == 12  # quads fan into two triangles each
        assert mesh.diameter == pytest.approx(math.sqrt(3) * 100.0)

    def test_out_of_range_face_index_reports_line(self, tmp_path):
        path = tmp_path / "bad.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 99\n")
        with pytest.raises(MeshParseError) as info:
            load_mesh(path)
        assert info.value.line == 4

    def test_triangle_ply(self, tmp_path):
        path = tmp_path / "quad.ply"
        path.write_text(TRIANGLE_PLY)
        mesh = load_mesh(path)
        assert len(mesh.vertices) == 4
        assert len(mesh.triangles) == 2

    def test_empty_mesh_rejected(self, tmp_path):
        path = tmp_path / "empty.obj"
        path.write_text("v 0 0 0\n")
        with pytest.raises(ValueError):
            load_mesh(path)


class TestRenderDepth:
    def test_frontal_cube_center_depth(self, cube, camera, frontal_pose):
        depth = render_depth(cube, frontal_pose, camera)
        # Front face sits at 1000 - 50 mm; cross-checked by the ray oracle.
        assert depth.data[32, 32] == pytest.approx(950.0, abs=1e-3)
        assert ray_cast_depth(cube, frontal_pose, camera, 32, 32) == pytest.approx(950.0, abs=1e-9)

    def test_object_behind_camera_renders_empty(self, cube, camera):
        depth = render_depth(cube, Pose(np.eye(3), [0.0, 0.0, -1000.0]), camera)
        assert not (depth.data > 0).any()

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_random_poses_match_ray_cast_oracle(self, cube, camera, seed):
        rng = np.random.default_rng(seed)
        pose = Pose(random_rotation(rng), rng.uniform([-60, -60, 700], [60, 60, 1200]))
        depth = render_depth(cube, pose, camera)
        ys, xs = np.nonzero(depth.data > 0)
        order = rng.permutation(len(ys))[:70]
        for y, x in zip(ys[order], xs[order]):
            oracle = ray_cast_depth(cube, pose, camera, x, y)
            assert abs(depth.data[y, x] - oracle) <= 1.0, (x, y)

    def test_depth_never_below_nearest_vertex_depth(self, cube, camera):
        # Nearest-vertex distance measured along the optical axis.
        rng = np.random.default_rng(9)
        for _ in range(5):
            pose = Pose(random_rotation(rng), rng.uniform([-50, -50, 600], [50, 50, 1100]))
            depth = render_depth(cube, pose, camera)
            nonzero = depth.data[depth.data > 0]
            min_vertex_z = pose.transform(cube.vertices)[:, 2].min()
            assert nonzero.min() >= min_vertex_z - 1.0

    def test_shared_edges_covered_exactly_once(self):
        # Two triangles tiling a quad: the top-left rule must assign every
        # pixel center on the shared diagonal to exactly one triangle.
        quad = TriangleMesh(
            np.array([[0.0, 0, 0], [40, 0, 0], [40, 40, 0], [0, 40, 0]]),
            np.array([[0, 1, 2], [0, 2, 3]]),
        )
        camera = CameraIntrinsics(fx=100.0, fy=100.0, cx=32.0, cy=32.0, width=64, height=64)
        pose = Pose(np.eye(3), [-20.0, -20.0, 100.0])
        both = render_depth(quad, pose, camera)
        one = render_depth(TriangleMesh(quad.vertices, quad.triangles[:1]), pose, camera)
        two = render_depth(TriangleMesh(quad.vertices, quad.triangles[1:]), pose, camera)
        covered_separately = (one.data > 0).astype(int) + (two.data > 0).astype(int)
        assert covered_separately.max() == 1  # no double coverage on the diagonal
        np.testing.assert_array_equal(both.data > 0, covered_separately > 0)

    def test_near_plane_clipping(self, cube, camera):
        # Half the cube pokes through the near plane; the render must stay
        # finite and only contain depths in front of it.
        depth = render_depth(cube, Pose(np.eye(3), [0.0, 0.0, 30.0]), camera, near=10.0)
        nonzero = depth.data[depth.data > 0]
        assert len(nonzero) > 0
        assert nonzero.min() >= 10.0

    def test_inplane_rotation_preserves_silhouette_area(self, cube, camera):
        rng = np.random.default_rng(4)
        base = Pose(random_rotation(rng), [0.0, 0.0, 900.0])
        area_base = (render_depth(cube, base, camera).data > 0).sum()
        for angle in (0.5, 1.4, 3.0):
            spun = Pose(rot_z(angle) @ base.rotation, base.translation)
            area_spun = (render_depth(cube, spun, camera).data > 0).sum()
            assert abs(area_spun - area_base) <= 0.02 * area_base

    def test_silhouette_diag_scales_inversely_with_depth(self):
        # Planar target, so every silhouette point sits exactly at the pose
        # depth and the pinhole ratio is exact up to rasterization.
        plate = TriangleMesh(
            np.array([[-20.0, -20, 0], [20, -20, 0], [20, 20, 0], [-20, 20, 0]]),
            np.array([[0, 1, 2], [0, 2, 3]]),
        )
        camera = CameraIntrinsics(fx=2500.0, fy=2500.0, cx=128.0, cy=128.0, width=256, height=256)
        diag_near = silhouette_bbox(render_depth(plate, Pose(np.eye(3), [0, 0, 1000.0]), camera)).diag
        diag_far = silhouette_bbox(render_depth(plate, Pose(np.eye(3), [0, 0, 2000.0]), camera)).diag
        assert diag_near / diag_far == pytest.approx(2.0, rel=0.03)


class TestSilhouetteBbox:
    def test_single_pixel(self):
        data = np.zeros((16, 16), np.float32)
        data[7, 5] = 100.0
        box = silhouette_bbox(DepthImage(16, 16, data))
        assert box.bbox == (5, 7, 1, 1)
        assert box.diag == pytest.approx(math.sqrt(2.0))

    def test_empty_image_returns_none(self):
        assert silhouette_bbox(DepthImage(8, 8, np.zeros((8, 8), np.float32))) is None

    def test_matches_naive_scan(self, cube, camera, frontal_pose):
        depth = render_depth(cube, frontal_pose, camera)
        ys, xs = np.nonzero(depth.data > 0)
        box = silhouette_bbox(depth)
        assert box.bbox == (xs.min(), ys.min(), xs.max() - xs.min() + 1, ys.max() - ys.min() + 1)


class TestGenerateCodebookViews:
    def test_level0_single_inplane_yields_12_views(self, tetrahedron, camera):
        views = list(generate_codebook_views(tetrahedron, subdivide_icosahedron(0), 1, camera, 700.0))
        assert len(views) == 12
        assert all(bbox is not None for _, _, bbox in views)

    def test_level1_four_inplane_rotations_all_distinct(self, tetrahedron, camera):
        views = list(generate_codebook_views(tetrahedron, subdivide_icosahedron(1), 4, camera, 700.0))
        assert len(views) == 168
        rotations = [r for _, r, _ in views]
        for i in range(len(rotations)):
            for j in range(i + 1, len(rotations)):
                if geodesic_distance(rotations[i], rotations[j]) <= 1e-9:
                    pytest.fail(f"views {i} and {j} share a rotation")

    def test_order_is_viewpoint_major(self, tetrahedron, camera):
        sphere = subdivide_icosahedron(0)
        views = list(generate_codebook_views(tetrahedron, sphere, 3, camera, 700.0))
        # Consecutive in-plane views of one viewpoint differ by rot_z(2pi/3).
        r0, r1 = views[0][1], views[1][1]
        # stored rotations are camera-to-object: R_cam2obj = R_obj2cam^T
        relative = r1.T @ r0
        assert geodesic_distance(relative, np.eye(3)) == pytest.approx(2 * math.pi / 3, abs=1e-9)


class TestSampleSurface:
    def test_points_lie_on_cube_surface(self, cube):
        points = sample_surface(cube, count=500, seed=1)
        assert len(points) == 500
        on_face = np.isclose(np.abs(points), 50.0, atol=1e-9).any(axis=1)
        assert on_face.all()
        inside = (np.abs(points) <= 50.0 + 1e-9).all(axis=1)
        assert inside.all()

    def test_deterministic_given_seed(self, cube):
        np.testing.assert_array_equal(sample_surface(cube, 100, seed=3), sample_surface(cube, 100, seed=3))


class TestDepthIO:
    def test_raw_roundtrip(self, cube, camera, frontal_pose, tmp_path):
        depth = render_depth(cube, frontal_pose, camera)
        path = tmp_path / "scene.depth"
        save_depth(depth, path)
        loaded = load_depth(path)
        np.testing.assert_array_equal(loaded.data, depth.data)

    def test_png_roundtrip_quantizes_to_millimetres(self, cube, camera, frontal_pose, tmp_path):
        depth = render_depth(cube, frontal_pose, camera)
        path = tmp_path / "scene.png"
        save_depth(depth, path)
        loaded = load_depth(path)
        np.testing.assert_allclose(loaded.data, np.rint(depth.data), atol=0.0)

    def test_truncated_raw_rejected(self, tmp_path):
        path = tmp_path / "broken.depth"
        path.write_bytes(b"\x02\x00\x00\x00\x02\x00\x00\x00\x00\x00")
        with pytest.raises(ValueError):
            load_depth(path)
