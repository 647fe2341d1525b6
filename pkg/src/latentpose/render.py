"""Depth-only z-buffer rasterization of triangle meshes.

Covers mesh loading (ASCII OBJ/PLY subsets), perspective-correct depth
rendering, silhouette bounding boxes, view generation over a view sphere,
surface sampling, and depth-image file I/O.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import MeshParseError
from .geometry import CameraIntrinsics, Pose, ViewSphere, _freeze, inplane_rotations, viewpoint_to_rotation

DEFAULT_NEAR_MM = 10.0

# Exact O(n^2) diameters up to this vertex count; beyond it the hull of a
# deterministic sample is used instead.
_EXACT_DIAMETER_LIMIT = 5000

# Triangles rasterized per vectorized batch (bounds the grid buffer size).
_RASTER_CHUNK = 32


@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangle mesh in millimetres with a derived diameter."""

    vertices: np.ndarray
    triangles: np.ndarray
    diameter: float = field(init=False)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64)
        t = np.array(self.triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3 or not np.all(np.isfinite(v)):
            raise ValueError("vertices must be a finite (n, 3) array")
        if t.ndim != 2 or t.shape[1] != 3 or t.shape[0] < 1:
            raise ValueError("mesh must have at least one triangle")
        if t.min(initial=0) < 0 or t.max(initial=-1) >= len(v):
            raise ValueError("triangle indices out of range")
        _freeze(self, "vertices", v)
        _freeze(self, "triangles", t)
        object.__setattr__(self, "diameter", _mesh_diameter(v))


def _mesh_diameter(vertices: np.ndarray) -> float:
    points = vertices
    if len(points) > _EXACT_DIAMETER_LIMIT:
        step = int(math.ceil(len(points) / _EXACT_DIAMETER_LIMIT))
        sample = points[::step]
        try:
            from scipy.spatial import ConvexHull

            sample = sample[ConvexHull(sample).vertices]
        except Exception:
            pass  # flat/degenerate sample: fall through to pairwise over it
        points = sample
    best = 0.0
    for i in range(len(points) - 1):
        d2 = np.sum((points[i + 1 :] - points[i]) ** 2, axis=1).max()
        best = max(best, float(d2))
    diameter = math.sqrt(best)
    if diameter <= 0.0:
        raise ValueError("mesh diameter must be positive")
    return diameter


@dataclass(frozen=True)
class DepthImage:
    """Per-pixel depth in millimetres; 0 marks pixels with no surface."""

    width: int
    height: int
    data: np.ndarray

    def __post_init__(self):
        d = np.array(self.data, dtype=np.float32)
        if d.shape != (self.height, self.width):
            raise ValueError(f"data shape {d.shape} does not match {self.height}x{self.width}")
        if not np.all(np.isfinite(d)) or d.min(initial=0.0) < 0.0:
            raise ValueError("depth values must be finite and non-negative")
        _freeze(self, "data", d)


# ---------------------------------------------------------------------------
# Mesh loading


def load_mesh(path) -> TriangleMesh:
    """Load an ASCII OBJ or PLY file; polygon faces are fan-triangulated."""
    text = str(path)
    if text.lower().endswith(".ply"):
        return _load_ply(path)
    return _load_obj(path)


def _load_obj(path) -> TriangleMesh:
    vertices = []
    triangles = []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "v":
                if len(parts) < 4:
                    raise MeshParseError("vertex record needs 3 coordinates", lineno)
                try:
                    vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
                except ValueError:
                    raise MeshParseError(f"bad vertex coordinate in {line!r}", lineno) from None
            elif parts[0] == "f":
                if len(parts) < 4:
                    raise MeshParseError("face record needs at least 3 indices", lineno)
                idx = []
                for token in parts[1:]:
                    head = token.split("/")[0]
                    try:
                        value = int(head)
                    except ValueError:
                        raise MeshParseError(f"bad face index {token!r}", lineno) from None
                    if value < 1 or value > len(vertices):
                        raise MeshParseError(
                            f"face index {value} out of range (have {len(vertices)} vertices)", lineno
                        )
                    idx.append(value - 1)
                for k in range(1, len(idx) - 1):
                    triangles.append((idx[0], idx[k], idx[k + 1]))
            # other records (vn, vt, usemtl, ...) are ignored
    if not vertices or not triangles:
        raise ValueError(f"{path}: mesh has no geometry")
    return TriangleMesh(np.array(vertices), np.array(triangles))


def _load_ply(path) -> TriangleMesh:
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MeshParseError("missing 'ply' magic", 1)
    counts = {}
    order = []
    vertex_props = []
    in_header = True
    body_start = 0
    current = None
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] != "ascii":
                raise MeshParseError("only ascii PLY is supported", lineno)
        elif parts[0] == "element":
            current = parts[1]
            counts[current] = int(parts[2])
            order.append(current)
        elif parts[0] == "property" and current == "vertex" and parts[1] != "list":
            vertex_props.append(parts[-1])
        elif parts[0] == "end_header":
            body_start = lineno
            in_header = False
            break
    if in_header:
        raise MeshParseError("missing end_header", len(lines))
    try:
        xi, yi, zi = (vertex_props.index(n) for n in ("x", "y", "z"))
    except ValueError:
        raise MeshParseError("vertex element must provide x, y, z", body_start) from None

    vertices = []
    triangles = []
    cursor = body_start  # 1-based line index of end_header
    for element in order:
        for _ in range(counts[element]):
            cursor += 1
            if cursor > len(lines):
                raise MeshParseError(f"unexpected end of file in element {element!r}", len(lines))
            parts = lines[cursor - 1].split()
            if element == "vertex":
                try:
                    vertices.append([float(parts[xi]), float(parts[yi]), float(parts[zi])])
                except (ValueError, IndexError):
                    raise MeshParseError("bad vertex record", cursor) from None
            elif element == "face":
                try:
                    n = int(parts[0])
                    idx = [int(p) for p in parts[1 : 1 + n]]
                except (ValueError, IndexError):
                    raise MeshParseError("bad face record", cursor) from None
                if len(idx) != n or n < 3:
                    raise MeshParseError("face record count mismatch", cursor)
                if min(idx) < 0 or max(idx) >= len(vertices):
                    raise MeshParseError(f"face index out of range in {parts!r}", cursor)
                for k in range(1, n - 1):
                    triangles.append((idx[0], idx[k], idx[k + 1]))
    if not vertices or not triangles:
        raise ValueError(f"{path}: mesh has no geometry")
    return TriangleMesh(np.array(vertices), np.array(triangles))


# ---------------------------------------------------------------------------
# Rasterization


def render_depth(mesh: TriangleMesh, pose: Pose, camera: CameraIntrinsics, near: float = DEFAULT_NEAR_MM) -> DepthImage:
    """Render the nearest-surface depth of ``mesh`` posed in the camera frame.

    Perspective-correct interpolation of 1/z, pixel centers at (x+0.5, y+0.5),
    ties on shared edges resolved by a top-left fill rule, no back-face
    culling. Geometry behind the near plane is clipped; a fully-behind object
    yields an all-zero image.
    """
    return _render_depth_rt(mesh, pose.rotation, pose.translation, camera, near)


def _depth_image_trusted(width, height, data) -> DepthImage:
    # Constructor bypass for internally rasterized data (already validated).
    image = object.__new__(DepthImage)
    data.setflags(write=False)
    object.__setattr__(image, "width", width)
    object.__setattr__(image, "height", height)
    object.__setattr__(image, "data", data)
    return image


def _render_depth_rt(mesh, rotation, translation, camera, near=DEFAULT_NEAR_MM) -> DepthImage:
    # Internal fast path: trusts rotation/translation, skipping Pose checks.
    cam_vertices = mesh.vertices @ rotation.T + translation
    zbuffer = np.full((camera.height, camera.width), np.inf, dtype=np.float32)
    corners = cam_vertices[mesh.triangles]  # (m, 3, 3)
    in_front = corners[:, :, 2] > near
    whole = in_front.all(axis=1)
    if whole.all():
        _rasterize(corners, camera, zbuffer)
    else:
        _rasterize(corners[whole], camera, zbuffer)
        crossing = corners[in_front.any(axis=1) & ~whole]
        if len(crossing):
            clipped = []
            for tri in crossing:
                clipped.extend(_clip_near(tri, near))
            if clipped:
                _rasterize(np.array(clipped), camera, zbuffer)
    data = np.where(zbuffer == np.inf, np.float32(0.0), zbuffer)
    return _depth_image_trusted(camera.width, camera.height, data)


def _clip_near(triangle: np.ndarray, near: float) -> list[np.ndarray]:
    """Clip one camera-space triangle against the plane z = near."""
    polygon = []
    for i in range(3):
        a, b = triangle[i], triangle[(i + 1) % 3]
        ina, inb = a[2] > near, b[2] > near
        if ina:
            polygon.append(a)
        if ina != inb:
            t = (near - a[2]) / (b[2] - a[2])
            polygon.append(a + t * (b - a))
    return [np.array((polygon[0], polygon[k], polygon[k + 1])) for k in range(1, len(polygon) - 1)]


def _rasterize(corners: np.ndarray, camera: CameraIntrinsics, zbuffer: np.ndarray) -> None:
    """Rasterize camera-space triangles (all z > 0) into ``zbuffer`` (f32 min)."""
    if len(corners) == 0:
        return
    width, height = camera.width, camera.height
    inv_z = 1.0 / corners[:, :, 2]
    px = camera.fx * corners[:, :, 0] * inv_z + camera.cx  # (m, 3)
    py = camera.fy * corners[:, :, 1] * inv_z + camera.cy

    # Normalize winding so every triangle has positive signed area.
    area2 = (px[:, 1] - px[:, 0]) * (py[:, 2] - py[:, 0]) - (py[:, 1] - py[:, 0]) * (px[:, 2] - px[:, 0])
    flip = area2 < 0.0
    if flip.any():
        px[flip, 1], px[flip, 2] = px[flip, 2], px[flip, 1].copy()
        py[flip, 1], py[flip, 2] = py[flip, 2], py[flip, 1].copy()
        inv_z[flip, 1], inv_z[flip, 2] = inv_z[flip, 2], inv_z[flip, 1].copy()
    keep = area2 != 0.0
    if not keep.all():
        px, py, inv_z = px[keep], py[keep], inv_z[keep]
        if len(px) == 0:
            return

    area2 = np.abs(area2[keep]) if not keep.all() else np.abs(area2)
    for start in range(0, len(px), _RASTER_CHUNK):
        stop = start + _RASTER_CHUNK
        _rasterize_chunk(px[start:stop], py[start:stop], inv_z[start:stop], area2[start:stop], width, height, zbuffer)


# Vertex order of the edge opposite each corner: edge e runs _EDGE_A[e] ->
# _EDGE_B[e], so its edge function is the barycentric numerator of corner e.
_EDGE_A = (1, 2, 0)
_EDGE_B = (2, 0, 1)


def _rasterize_chunk(px, py, inv_z, area2, width, height, zbuffer) -> None:
    # Pixel x is covered when its center x+0.5 falls in [min, max): the loose
    # integer bounds below only size the candidate grid.
    x0 = max(int(math.ceil(px.min() - 0.5)), 0)
    x1 = min(int(math.floor(px.max() - 0.5)), width - 1)
    y0 = max(int(math.ceil(py.min() - 0.5)), 0)
    y1 = min(int(math.floor(py.max() - 0.5)), height - 1)
    if x0 > x1 or y0 > y1:
        return
    gx = np.arange(x0, x1 + 1, dtype=np.float64) + 0.5
    gy = np.arange(y0, y1 + 1, dtype=np.float64) + 0.5
    pcx = np.broadcast_to(gx, (len(gy), len(gx))).reshape(1, 1, -1)
    pcy = np.repeat(gy, len(gx)).reshape(1, 1, -1)

    ax = px[:, _EDGE_A, None]
    ay = py[:, _EDGE_A, None]
    dx = px[:, _EDGE_B, None] - ax
    dy = py[:, _EDGE_B, None] - ay
    value = dx * (pcy - ay) - dy * (pcx - ax)  # (m, 3, P) edge functions
    # Top-left fill rule: a pixel exactly on an edge belongs to the triangle
    # whose edge points up (dy < 0) or is a rightward horizontal edge.
    tie_ok = (dy < 0.0) | ((dy == 0.0) & (dx > 0.0))
    inside = ((value > 0.0) | ((value == 0.0) & tie_ok)).all(axis=1)

    # sum_e E_e/z_e = (2*area)/z_interp; positive wherever a pixel is inside.
    denominator = np.einsum("mep,me->mp", value, inv_z)
    depth = area2[:, None] / np.where(denominator > 0.0, denominator, -1.0)
    depth = np.where(inside, depth, np.inf).min(axis=0)
    block = zbuffer[y0 : y1 + 1, x0 : x1 + 1]
    np.minimum(block, depth.astype(np.float32).reshape(block.shape), out=block)


# ---------------------------------------------------------------------------
# Silhouettes and view generation


@dataclass(frozen=True)
class SilhouetteBox:
    """Tight axis-aligned box of nonzero depth pixels."""

    bbox: tuple[int, int, int, int]  # x, y, w, h
    diag: float
    center: tuple[float, float]


def silhouette_bbox(depth: DepthImage) -> SilhouetteBox | None:
    """Bounding box of the rendered silhouette, or None for an empty image."""
    mask = depth.data > 0
    cols = np.flatnonzero(mask.any(axis=0))
    if len(cols) == 0:
        return None
    rows = np.flatnonzero(mask.any(axis=1))
    x, y = int(cols[0]), int(rows[0])
    w, h = int(cols[-1]) - x + 1, int(rows[-1]) - y + 1
    return SilhouetteBox((x, y, w, h), math.hypot(w, h), (x + w / 2.0, y + h / 2.0))


def generate_codebook_views(
    mesh: TriangleMesh,
    sphere: ViewSphere,
    n_inplane: int,
    camera: CameraIntrinsics,
    t_syn_z: float = 700.0,
):
    """Yield (DepthImage, camera-to-object rotation, bbox) over the whole view set.

    Views are ordered viewpoint-major, in-plane-minor; the object sits at
    (0, 0, t_syn_z). Views whose silhouette is empty are yielded with
    bbox=None rather than dropped, so callers can detect them.
    """
    if t_syn_z <= 0.0:
        raise ValueError("t_syn_z must be positive")
    spins = inplane_rotations(n_inplane)
    translation = np.array([0.0, 0.0, t_syn_z])
    for viewpoint in sphere.viewpoints:
        base = viewpoint_to_rotation(viewpoint).T  # object/world -> camera
        for spin in spins:
            r_obj2cam = spin @ base
            depth = _render_depth_rt(mesh, r_obj2cam, translation, camera)
            box = silhouette_bbox(depth)
            yield depth, r_obj2cam.T, (box.bbox if box else None)


def sample_surface(mesh: TriangleMesh, count: int = 3000, seed: int = 0) -> np.ndarray:
    """Uniform-area random points on the mesh surface, deterministic per seed."""
    if count < 1:
        raise ValueError("count must be >= 1")
    corners = mesh.vertices[mesh.triangles]
    cross = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    total = areas.sum()
    if total <= 0.0:
        raise ValueError("mesh has zero surface area")
    rng = np.random.Generator(np.random.PCG64(seed))
    tri = rng.choice(len(areas), size=count, p=areas / total)
    u = rng.random(count)
    v = rng.random(count)
    su = np.sqrt(u)
    w0, w1, w2 = 1.0 - su, su * (1.0 - v), su * v
    c = corners[tri]
    return w0[:, None] * c[:, 0] + w1[:, None] * c[:, 1] + w2[:, None] * c[:, 2]


# ---------------------------------------------------------------------------
# Depth image I/O

_RAW_HEADER = struct.Struct("<II")


def save_depth_raw(depth: DepthImage, path) -> None:
    """Write width/height header plus little-endian f32 depth data."""
    with open(path, "wb") as fh:
        fh.write(_RAW_HEADER.pack(depth.width, depth.height))
        fh.write(depth.data.astype("<f4").tobytes())


def load_depth_raw(path) -> DepthImage:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _RAW_HEADER.size:
        raise ValueError(f"{path}: truncated depth header")
    width, height = _RAW_HEADER.unpack_from(blob)
    expected = _RAW_HEADER.size + 4 * width * height
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=_RAW_HEADER.size).reshape(height, width)
    return DepthImage(width, height, data)


def save_depth_png(depth: DepthImage, path) -> None:
    """Write 16-bit grayscale PNG with values in integer millimetres."""
    values = np.clip(np.rint(depth.data), 0, 65535).astype(np.uint16)
    Image.fromarray(values).save(path, format="PNG")


def load_depth_png(path) -> DepthImage:
    with Image.open(path) as img:
        values = np.asarray(img, dtype=np.float32)
    height, width = values.shape
    return DepthImage(width, height, values)


def save_depth(depth: DepthImage, path) -> None:
    """Dispatch on extension: .png for 16-bit PNG, anything else raw f32."""
    if str(path).lower().endswith(".png"):
        save_depth_png(depth, path)
    else:
        save_depth_raw(depth, path)


def load_depth(path) -> DepthImage:
    if str(path).lower().endswith(".png"):
        return load_depth_png(path)
    return load_depth_raw(path)
