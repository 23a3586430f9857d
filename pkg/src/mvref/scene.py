"""Procedural synthetic scenes and a software rasterizer.

World frame: right-handed, z up, ground plane z = 0.  The synthetic
trajectory runs along +x at y = 0.  At each trajectory location a rig of
four cameras renders the scene: ``left`` (+y), ``right`` (-y) and ``back``
(-x) at 1.6 m height, and ``top`` looking straight down from 8 m.  Camera
frames are x right, y down, z forward (see geometry module).

Scenes are a tessellated ground plane plus axis-aligned boxes and vertical
walls, kept clear of a corridor around the trajectory.  Every surface quad
is tessellated on a grid with a center vertex per cell (4 triangles per
cell) so that no triangle edge exceeds the 0.5 m budget, diagonals
included.

The low-quality mesh is derived from the clean one by displacing vertices
along their area-weighted normals (Gaussian noise plus a smooth sinusoidal
bulge) and deleting a fraction of triangles; deleted triangles expose the
surfaces behind them, which is what the refinement model must learn to
undo.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import CameraIntrinsics, Se3Transform

MAX_EDGE = 0.5  # m, tessellation budget for every triangle edge
NEAR_PLANE = 0.05  # m
CAMERA_HEIGHT = 1.6  # m, lateral and back views
TOP_HEIGHT = 8.0  # m
LOCATION_SPACING = 0.65  # m along the trajectory
VIEW_TAGS = ("left", "right", "back", "top")

_CORRIDOR_HALF_WIDTH = 1.5  # m kept free of obstacles around the trajectory


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class CorruptionSpec:
    noise_sigma: float = 0.0  # stddev of vertex displacement along normals (m)
    hole_fraction: float = 0.0  # fraction of triangles deleted
    bulge_amplitude: float = 0.0  # low-frequency displacement amplitude (m)
    bulge_wavelength: float = 8.0  # m

    def __post_init__(self):
        if not 0.0 <= self.hole_fraction < 1.0:
            raise SceneError("hole_fraction must be in [0, 1)")
        if self.noise_sigma < 0 or self.bulge_amplitude < 0 or self.bulge_wavelength <= 0:
            raise SceneError("corruption magnitudes must be non-negative")


@dataclass(frozen=True)
class SceneSpec:
    rng_seed: int = 0
    extent: float = 30.0  # ground plane is [0, extent] x [-extent/2, extent/2]
    n_boxes: int = 6
    n_walls: int = 2
    corruption: CorruptionSpec = field(default_factory=CorruptionSpec)

    def __post_init__(self):
        if self.extent < 8.0:
            raise SceneError("extent must be at least 8 m")
        if self.n_boxes < 0 or self.n_walls < 0:
            raise SceneError("object counts must be non-negative")


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64, meters
    triangles: np.ndarray  # (T, 3) int64 vertex indices
    albedo: np.ndarray  # (T, 3) float64 RGB in [0, 1]

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        self.albedo = np.ascontiguousarray(self.albedo, dtype=np.float64)
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise SceneError("triangle indices out of range")
        if len(self.albedo) != len(self.triangles):
            raise SceneError("albedo must be per-triangle")

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def triangle_corners(self):
        """(T, 3, 3) corner positions."""
        return self.vertices[self.triangles]

    def triangle_areas(self) -> np.ndarray:
        c = self.triangle_corners()
        cross = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        return 0.5 * np.linalg.norm(cross, axis=1)


@dataclass
class RenderedView:
    intrinsics: CameraIntrinsics
    pose: Se3Transform  # world-from-camera
    idepth: np.ndarray  # (H, W) float32, 1/m, 0 = background
    color: np.ndarray  # (H, W, 3) float32
    normals: np.ndarray  # (H, W, 3) float32, camera frame, unit or zero
    area: np.ndarray  # (H, W) float32, m^2 per source triangle
    tri_id: np.ndarray  # (H, W) uint64, 0 = background
    view_tag: str = ""


# --- triangle identity -------------------------------------------------------

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix64(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):  # wraparound is the point of a hash
        x = (x ^ (x >> np.uint64(30))) * _M1
        x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


def _hash_positions(p: np.ndarray) -> np.ndarray:
    """Hash (..., 3) float64 positions to uint64, one value per position."""
    # +0.0 canonicalizes -0.0 so equal positions always hash equally.
    bits = (np.ascontiguousarray(p, dtype=np.float64) + 0.0).view(np.uint64)
    with np.errstate(over="ignore"):
        h = _mix64(bits[..., 0] + _GOLDEN)
        h = _mix64(h ^ (bits[..., 1] + _GOLDEN))
        h = _mix64(h ^ (bits[..., 2] + _GOLDEN))
    return h


def triangle_id_hash(v0, v1, v2) -> np.uint64:
    """Order-independent 64-bit ID of a triangle's global vertex positions.

    Each vertex hashes on its own; the three hashes combine by wraparound
    sum (commutative) and a final mix.  0 is reserved for background and
    remapped to 1.
    """
    corners = np.stack(
        [np.asarray(v, dtype=np.float64) for v in (v0, v1, v2)], axis=-2
    )
    return _hash_triangle_corners(corners)


def _hash_triangle_corners(corners: np.ndarray) -> np.ndarray:
    """corners (..., 3 vertices, 3 coords) -> uint64 (...)."""
    per_vertex = _hash_positions(corners)
    combined = _mix64(per_vertex.sum(axis=-1, dtype=np.uint64))
    return np.where(combined == 0, np.uint64(1), combined)[()]


def mesh_triangle_ids(mesh: TriangleMesh) -> np.ndarray:
    return _hash_triangle_corners(mesh.triangle_corners())


# --- procedural construction --------------------------------------------------

def _tessellated_quad(origin, edge_u, edge_v):
    """Tessellate a parallelogram into 4 triangles per grid cell.

    Cell counts are chosen so every edge (diagonals included, via the cell
    center vertex) stays below MAX_EDGE.  Returns (vertices, triangles).
    """
    origin = np.asarray(origin, dtype=np.float64)
    edge_u = np.asarray(edge_u, dtype=np.float64)
    edge_v = np.asarray(edge_v, dtype=np.float64)
    nu = max(1, math.ceil(np.linalg.norm(edge_u) / MAX_EDGE))
    nv = max(1, math.ceil(np.linalg.norm(edge_v) / MAX_EDGE))
    iu = np.arange(nu + 1)[:, None, None]
    iv = np.arange(nv + 1)[None, :, None]
    grid = origin + edge_u * (iu / nu) + edge_v * (iv / nv)  # (nu+1, nv+1, 3)
    centers = origin + edge_u * ((np.arange(nu)[:, None, None] + 0.5) / nu) + edge_v * (
        (np.arange(nv)[None, :, None] + 0.5) / nv
    )
    vertices = np.concatenate([grid.reshape(-1, 3), centers.reshape(-1, 3)])

    def gid(i, j):
        return i * (nv + 1) + j

    n_grid = (nu + 1) * (nv + 1)
    tris = []
    for i in range(nu):
        for j in range(nv):
            c = n_grid + i * nv + j
            a, b = gid(i, j), gid(i + 1, j)
            d, e = gid(i + 1, j + 1), gid(i, j + 1)
            tris += [(a, b, c), (b, d, c), (d, e, c), (e, a, c)]
    return vertices, np.asarray(tris, dtype=np.int64)


def quad_triangle_count(len_u: float, len_v: float) -> int:
    """Triangles produced by tessellating a len_u x len_v quad."""
    nu = max(1, math.ceil(len_u / MAX_EDGE))
    nv = max(1, math.ceil(len_v / MAX_EDGE))
    return 4 * nu * nv


def _merge_parts(parts):
    vertices, triangles = [], []
    offset = 0
    for v, t in parts:
        vertices.append(v)
        triangles.append(t + offset)
        offset += len(v)
    return np.concatenate(vertices), np.concatenate(triangles)


def scene_layout(spec: SceneSpec) -> dict:
    """Draw all random layout parameters of a scene, deterministically.

    Separated from mesh construction so tests can recount tessellation
    sizes from the layout alone.  Boxes and walls stay clear of the
    trajectory corridor (|y| < 1.5 m) and of the plane border.
    """
    rng = np.random.default_rng(spec.rng_seed)
    half = spec.extent / 2.0
    boxes = []
    for _ in range(spec.n_boxes):
        size_x = rng.uniform(1.0, 4.0)
        size_y = rng.uniform(1.0, 4.0)
        height = rng.uniform(1.0, 4.0)
        cx = rng.uniform(2.0, spec.extent - 2.0)
        side = 1.0 if rng.random() < 0.5 else -1.0
        lo = _CORRIDOR_HALF_WIDTH + size_y / 2.0
        hi = max(half - 1.0 - size_y / 2.0, lo + 0.1)
        cy = side * rng.uniform(lo, hi)
        boxes.append({"center": (cx, cy), "size": (size_x, size_y), "height": height})
    walls = []
    for _ in range(spec.n_walls):
        length = rng.uniform(4.0, 10.0)
        height = rng.uniform(2.0, 5.0)
        x0 = rng.uniform(1.0, max(spec.extent - length - 1.0, 1.5))
        side = 1.0 if rng.random() < 0.5 else -1.0
        y = side * rng.uniform(_CORRIDOR_HALF_WIDTH + 0.5, max(half - 1.0, 2.2))
        walls.append({"x0": x0, "length": length, "height": height, "y": y})
    return {"extent": spec.extent, "boxes": boxes, "walls": walls, "albedo_seed": spec.rng_seed + 1}


def _box_parts(center, size, height):
    cx, cy = center
    sx, sy = size
    x0, x1 = cx - sx / 2, cx + sx / 2
    y0, y1 = cy - sy / 2, cy + sy / 2
    ex = np.array([sx, 0.0, 0.0])
    ey = np.array([0.0, sy, 0.0])
    ez = np.array([0.0, 0.0, height])
    # edge order chosen so face normals point outward
    return [
        _tessellated_quad((x0, y0, height), ex, ey),  # top (+z)
        _tessellated_quad((x0, y0, 0.0), ex, ez),  # -y side
        _tessellated_quad((x0, y1, 0.0), ez, ex),  # +y side
        _tessellated_quad((x0, y0, 0.0), ez, ey),  # -x side
        _tessellated_quad((x1, y0, 0.0), ey, ez),  # +x side
    ]


def build_scene(spec: SceneSpec) -> TriangleMesh:
    """Ground plane plus boxes and walls; deterministic in spec.rng_seed."""
    layout = scene_layout(spec)
    half = spec.extent / 2.0
    parts = [
        _tessellated_quad(
            (0.0, -half, 0.0),
            (spec.extent, 0.0, 0.0),
            (0.0, spec.extent, 0.0),
        )
    ]
    for box in layout["boxes"]:
        parts.extend(_box_parts(box["center"], box["size"], box["height"]))
    for wall in layout["walls"]:
        parts.append(
            _tessellated_quad(
                (wall["x0"], wall["y"], 0.0),
                (wall["length"], 0.0, 0.0),
                (0.0, 0.0, wall["height"]),
            )
        )
    vertices, triangles = _merge_parts(parts)
    albedo_rng = np.random.default_rng(layout["albedo_seed"])
    albedo = albedo_rng.uniform(0.15, 0.95, size=(len(triangles), 3))
    return TriangleMesh(vertices, triangles, albedo)


def vertex_normals(mesh: TriangleMesh) -> np.ndarray:
    """Area-weighted vertex normals (unit length, or zero for lone vertices)."""
    corners = mesh.triangle_corners()
    face = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    acc = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(acc, mesh.triangles[:, k], face)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    return np.divide(acc, norm, out=np.zeros_like(acc), where=norm > 1e-12)


def corrupt_mesh(mesh: TriangleMesh, c: CorruptionSpec, seed: int) -> TriangleMesh:
    """Derive the low-quality mesh: normal noise, holes, sinusoidal bulge.

    Vertex/triangle correspondence to the clean mesh is retained for the
    triangles that survive hole deletion (their vertex indices reference
    the same, displaced, vertex array).
    """
    rng = np.random.default_rng(seed)
    normals = vertex_normals(mesh)
    displacement = np.zeros(len(mesh.vertices))
    if c.noise_sigma > 0:
        displacement += rng.normal(0.0, c.noise_sigma, size=len(mesh.vertices))
    if c.bulge_amplitude > 0:
        theta = rng.uniform(0.0, 2.0 * np.pi)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        direction = np.array([np.cos(theta), np.sin(theta), 0.0])
        k = 2.0 * np.pi / c.bulge_wavelength
        displacement += c.bulge_amplitude * np.sin(k * (mesh.vertices @ direction) + phase)
    vertices = mesh.vertices + displacement[:, None] * normals

    keep = np.ones(mesh.n_triangles, dtype=bool)
    n_holes = int(math.floor(c.hole_fraction * mesh.n_triangles))
    if n_holes:
        keep[rng.choice(mesh.n_triangles, size=n_holes, replace=False)] = False

    out = TriangleMesh(vertices, mesh.triangles[keep], mesh.albedo[keep])
    areas = out.triangle_areas()
    if np.any(areas < 1e-12):  # displacement can in principle collapse a triangle
        good = areas >= 1e-12
        out = TriangleMesh(out.vertices, out.triangles[good], out.albedo[good])
    return out


# --- rasterization -------------------------------------------------------------

def _clip_polygon_near(poly, near: float):
    """Sutherland-Hodgman clip of a camera-frame polygon against z >= near."""
    out = []
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        a_in, b_in = a[2] >= near, b[2] >= near
        if a_in:
            out.append(a)
        if a_in != b_in:
            s = (near - a[2]) / (b[2] - a[2])
            out.append(a + s * (b - a))
    return out


def rasterize(mesh: TriangleMesh, k: CameraIntrinsics, pose: Se3Transform) -> RenderedView:
    """Z-buffered perspective rasterization of all mesh feature channels.

    Inverse depth interpolates linearly in screen space (exact for planar
    triangles); the nearest surface (largest 1/z) wins each pixel.  Normals
    are flat per triangle, expressed in the camera frame and flipped toward
    the camera; area and color are per-triangle constants; background
    pixels keep zeros everywhere.
    """
    h, w = k.height, k.width
    zbuf = np.zeros((h, w), dtype=np.float64)  # stores inverse depth; 0 = background
    winner = np.full((h, w), -1, dtype=np.int64)

    cam_from_world_r = pose.rotation.T
    verts_cam = (mesh.vertices - pose.translation) @ pose.rotation  # (V, 3)

    tri_z = verts_cam[mesh.triangles][:, :, 2]  # (T, 3)
    front = tri_z >= NEAR_PLANE
    all_front = front.all(axis=1)
    any_front = front.any(axis=1)

    # Projected pixel coordinates for every vertex (meaningless for z < near,
    # used only by fully-front triangles).
    with np.errstate(divide="ignore", invalid="ignore"):
        proj_u = k.fx * verts_cam[:, 0] / verts_cam[:, 2] + k.cx
        proj_v = k.fy * verts_cam[:, 1] / verts_cam[:, 2] + k.cy

    def draw(px, py, iz, tri_index):
        """Rasterize one screen-space triangle; px/py/iz are 3-vectors."""
        x_lo = max(int(math.ceil(min(px))), 0)
        x_hi = min(int(math.floor(max(px))), w - 1)
        y_lo = max(int(math.ceil(min(py))), 0)
        y_hi = min(int(math.floor(max(py))), h - 1)
        if x_lo > x_hi or y_lo > y_hi:
            return
        area2 = (px[1] - px[0]) * (py[2] - py[0]) - (py[1] - py[0]) * (px[2] - px[0])
        if abs(area2) < 1e-12:
            return
        gx = np.arange(x_lo, x_hi + 1, dtype=np.float64)[None, :]
        gy = np.arange(y_lo, y_hi + 1, dtype=np.float64)[:, None]
        w0 = ((px[2] - px[1]) * (gy - py[1]) - (py[2] - py[1]) * (gx - px[1])) / area2
        w1 = ((px[0] - px[2]) * (gy - py[2]) - (py[0] - py[2]) * (gx - px[2])) / area2
        w2 = 1.0 - w0 - w1
        iz_pix = w0 * iz[0] + w1 * iz[1] + w2 * iz[2]
        patch_z = zbuf[y_lo : y_hi + 1, x_lo : x_hi + 1]
        inside = (w0 >= 0.0) & (w1 >= 0.0) & (w2 >= 0.0) & (iz_pix > patch_z)
        if not inside.any():
            return
        patch_z[inside] = iz_pix[inside]
        winner[y_lo : y_hi + 1, x_lo : x_hi + 1][inside] = tri_index

    # Vectorized screen-bounds cull so the python loop only visits
    # triangles whose bounding box meets the image.
    idx_full = np.nonzero(all_front)[0]
    if idx_full.size:
        tri_u = proj_u[mesh.triangles[idx_full]]
        tri_v = proj_v[mesh.triangles[idx_full]]
        on_screen = (
            (tri_u.max(axis=1) >= 0.0)
            & (tri_u.min(axis=1) <= w - 1.0)
            & (tri_v.max(axis=1) >= 0.0)
            & (tri_v.min(axis=1) <= h - 1.0)
        )
        for t_idx in idx_full[on_screen]:
            vi = mesh.triangles[t_idx]
            draw(proj_u[vi], proj_v[vi], 1.0 / verts_cam[vi, 2], t_idx)

    for t_idx in np.nonzero(any_front & ~all_front)[0]:
        poly = _clip_polygon_near([verts_cam[i] for i in mesh.triangles[t_idx]], NEAR_PLANE)
        for j in range(1, len(poly) - 1):
            tri = np.stack([poly[0], poly[j], poly[j + 1]])
            z = tri[:, 2]
            px = k.fx * tri[:, 0] / z + k.cx
            py = k.fy * tri[:, 1] / z + k.cy
            draw(px, py, 1.0 / z, t_idx)

    view = RenderedView(
        intrinsics=k,
        pose=pose,
        idepth=np.zeros((h, w), dtype=np.float32),
        color=np.zeros((h, w, 3), dtype=np.float32),
        normals=np.zeros((h, w, 3), dtype=np.float32),
        area=np.zeros((h, w), dtype=np.float32),
        tri_id=np.zeros((h, w), dtype=np.uint64),
    )
    hit = winner >= 0
    if not hit.any():
        return view

    corners = mesh.triangle_corners()
    face = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    face_norm = np.linalg.norm(face, axis=1, keepdims=True)
    tri_area = (0.5 * face_norm[:, 0]).astype(np.float64)
    normals_cam = np.divide(face, face_norm, out=np.zeros_like(face), where=face_norm > 0)
    normals_cam = normals_cam @ pose.rotation  # rows become camera-frame normals
    centroids_cam = verts_cam[mesh.triangles].mean(axis=1)
    flip = np.sum(normals_cam * centroids_cam, axis=1) > 0
    normals_cam[flip] = -normals_cam[flip]
    ids = mesh_triangle_ids(mesh)

    idx = winner[hit]
    view.idepth[hit] = zbuf[hit]
    view.color[hit] = mesh.albedo[idx]
    view.normals[hit] = normals_cam[idx]
    view.area[hit] = tri_area[idx]
    view.tri_id[hit] = ids[idx]
    return view


# --- camera rigs ----------------------------------------------------------------

def default_intrinsics(width: int = 288, height: int = 96) -> CameraIntrinsics:
    """90-degree horizontal field of view, principal point at the center."""
    return CameraIntrinsics(
        fx=width / 2.0,
        fy=width / 2.0,
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
        width=width,
        height=height,
    )


def trajectory_base_poses(n_locations: int, start_x: float = 2.0) -> list:
    """World-from-base poses along the trajectory (base = x forward, z up)."""
    return [
        Se3Transform(np.eye(3), [start_x + i * LOCATION_SPACING, 0.0, 0.0])
        for i in range(n_locations)
    ]


def extent_for_locations(n_locations: int, margin: float = 8.0) -> float:
    return max(24.0, 2.0 + (n_locations - 1) * LOCATION_SPACING + margin)


def _look_pose(center, z_cam, y_cam) -> Se3Transform:
    z = np.asarray(z_cam, dtype=np.float64)
    z = z / np.linalg.norm(z)
    y = np.asarray(y_cam, dtype=np.float64)
    y = y - z * (y @ z)
    y = y / np.linalg.norm(y)
    x = np.cross(y, z)
    return Se3Transform(np.stack([x, y, z], axis=1), np.asarray(center, dtype=np.float64))


def rig_poses(base_pose: Se3Transform) -> dict:
    """The four world-from-camera poses of one location's rig."""
    r = base_pose.rotation
    origin = base_pose.translation
    forward, left = r @ [1.0, 0.0, 0.0], r @ [0.0, 1.0, 0.0]
    down = [0.0, 0.0, -1.0]
    side_center = origin + [0.0, 0.0, CAMERA_HEIGHT]
    return {
        "left": _look_pose(side_center, left, down),
        "right": _look_pose(side_center, -left, down),
        "back": _look_pose(side_center, -forward, down),
        "top": _look_pose(origin + [0.0, 0.0, TOP_HEIGHT], down, forward),
    }


def _rotation_xyz(angles) -> np.ndarray:
    ax, ay, az = angles
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rx @ ry @ rz


def perturb_pose(pose: Se3Transform, rng) -> Se3Transform:
    """Augmentation jitter: uniform +-0.1 m and +-2 degrees per axis."""
    dt = rng.uniform(-0.1, 0.1, size=3)
    angles = rng.uniform(-np.deg2rad(2.0), np.deg2rad(2.0), size=3)
    return Se3Transform(pose.rotation @ _rotation_xyz(angles), pose.translation + dt)


def render_location(
    clean: TriangleMesh,
    corrupted: TriangleMesh,
    base_pose: Se3Transform,
    k: CameraIntrinsics,
    augment_seed=None,
):
    """Render one rig: 4 (low-quality view, high-quality idepth plane) pairs.

    The corrupted mesh supplies every RenderedView channel; the clean mesh
    supplies only the supervision inverse-depth, rendered from the same
    pose.  With ``augment_seed`` set, each view's pose is independently
    jittered (deterministic in the seed).
    """
    rng = None if augment_seed is None else np.random.default_rng(augment_seed)
    pairs = []
    for tag in VIEW_TAGS:
        pose = rig_poses(base_pose)[tag]
        if rng is not None:
            pose = perturb_pose(pose, rng)
        lq = rasterize(corrupted, k, pose)
        lq.view_tag = tag
        hq = rasterize(clean, k, pose).idepth
        pairs.append((lq, hq))
    return pairs
