"""Camera model, depth/mesh containers, backprojection and z-buffer rendering.

Frame convention: x right, y down, z forward. Depth is the z coordinate.
Missing depth is NaN in memory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .validation import InputError, as_depth_array

NEAR_CLIP = 1e-4


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InputError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InputError("principal point must lie inside the image")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def scaled(self, factor: int) -> "CameraIntrinsics":
        """Intrinsics for an image supersampled by an integer factor."""
        return CameraIntrinsics(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=(self.cx + 0.5) * factor - 0.5,
            cy=(self.cy + 0.5) * factor - 0.5,
            width=self.width * factor,
            height=self.height * factor,
        )

    def ray_directions(self) -> np.ndarray:
        """Per-pixel ray direction with unit z component, shape (H, W, 3)."""
        u = np.arange(self.width, dtype=np.float64)
        v = np.arange(self.height, dtype=np.float64)
        uu, vv = np.meshgrid(u, v)
        return np.stack(
            [(uu - self.cx) / self.fx, (vv - self.cy) / self.fy, np.ones_like(uu)], axis=-1
        )

    def project(self, points: np.ndarray) -> np.ndarray:
        """Project camera-frame points to continuous pixel coordinates (u, v)."""
        points = np.asarray(points, dtype=np.float64)
        z = points[..., 2]
        return np.stack(
            [self.fx * points[..., 0] / z + self.cx, self.fy * points[..., 1] / z + self.cy],
            axis=-1,
        )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            int(d["width"]), int(d["height"]),
        )


@dataclass(frozen=True, eq=False)
class DepthImage:
    """Metric depth in meters; NaN marks missing pixels."""

    depth: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "depth", as_depth_array(self.depth))

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.depth)

    def __eq__(self, other):
        if not isinstance(other, DepthImage):
            return NotImplemented
        return np.array_equal(self.depth, other.depth, equal_nan=True)


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray
    pixel_index: np.ndarray
    image_shape: tuple[int, int] = (0, 0)

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, keep: np.ndarray) -> "PointCloud":
        return PointCloud(self.points[keep], self.normals[keep], self.pixel_index[keep], self.image_shape)


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise InputError(f"vertices must be (N, 3), got {v.shape}")
        if t.ndim != 2 or t.shape[1] != 3 or len(t) == 0:
            raise InputError("mesh needs at least one triangle given as index triples")
        if t.min() < 0 or t.max() >= len(v):
            raise InputError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    def __eq__(self, other):
        if not isinstance(other, TriangleMesh):
            return NotImplemented
        return np.array_equal(self.vertices, other.vertices) and np.array_equal(
            self.triangles, other.triangles
        )

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def scaled(self, s: float) -> "TriangleMesh":
        return TriangleMesh(self.vertices * s, self.triangles)

    def concatenate(self, other: "TriangleMesh") -> "TriangleMesh":
        return TriangleMesh(
            np.vstack([self.vertices, other.vertices]),
            np.vstack([self.triangles, other.triangles + len(self.vertices)]),
        )


def wrap_angle(a: float) -> float:
    """Map an angle to (-pi, pi]; angles already in range are returned unchanged."""
    if -math.pi < a <= math.pi:
        return a
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class PoseTransform:
    """Uniform scale, then yaw about the vertical (y) axis, then translation."""

    yaw: float = 0.0
    scale: float = 1.0
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.scale > 0:
            raise InputError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "translation", tuple(float(x) for x in self.translation))
        if len(self.translation) != 3:
            raise InputError("translation must have 3 components")

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return (self.scale * points) @ self.rotation().T + np.asarray(self.translation)

    def with_translation(self, t) -> "PoseTransform":
        return PoseTransform(self.yaw, self.scale, tuple(t))

    def to_dict(self) -> dict:
        return {"yaw": self.yaw, "scale": self.scale, "translation": list(self.translation)}

    @classmethod
    def from_dict(cls, d: dict) -> "PoseTransform":
        return cls(float(d["yaw"]), float(d["scale"]), tuple(float(x) for x in d["translation"]))


@dataclass(frozen=True, eq=False)
class RenderResult:
    """Rendered depth (NaN where uncovered) and its coverage mask."""

    depth: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.mask is None:
            object.__setattr__(self, "mask", np.isfinite(self.depth))


def backproject(depth, K: CameraIntrinsics) -> PointCloud:
    """Lift every non-missing pixel to a 3D point with a central-difference normal.

    Normals point toward the camera and are NaN where a neighbour is missing
    or the pixel sits on the image border.
    """
    d = as_depth_array(depth)
    if d.shape != K.shape:
        raise InputError(f"depth shape {d.shape} does not match camera {K.shape}")
    rays = K.ray_directions()
    pts = rays * d[..., None]

    normals = np.full_like(pts, np.nan)
    dx = pts[1:-1, 2:] - pts[1:-1, :-2]
    dy = pts[2:, 1:-1] - pts[:-2, 1:-1]
    n = np.cross(dx, dy)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        n = n / norm
    centre = pts[1:-1, 1:-1]
    flip = np.sum(n * centre, axis=-1) > 0
    n[flip] *= -1
    n[~np.isfinite(norm[..., 0]) | (norm[..., 0] == 0)] = np.nan
    normals[1:-1, 1:-1] = n

    valid = np.isfinite(d)
    idx = np.flatnonzero(valid)
    return PointCloud(
        points=pts.reshape(-1, 3)[idx],
        normals=normals.reshape(-1, 3)[idx],
        pixel_index=idx,
        image_shape=d.shape,
    )


def _clip_near(tri: np.ndarray) -> list[np.ndarray]:
    """Clip a camera-frame triangle against z = NEAR_CLIP (Sutherland-Hodgman)."""
    inside = tri[:, 2] >= NEAR_CLIP
    if inside.all():
        return [tri]
    if not inside.any():
        return []
    poly = []
    for i in range(3):
        a, b = tri[i], tri[(i + 1) % 3]
        ia, ib = inside[i], inside[(i + 1) % 3]
        if ia:
            poly.append(a)
        if ia != ib:
            t = (NEAR_CLIP - a[2]) / (b[2] - a[2])
            poly.append(a + t * (b - a))
    return [np.array([poly[0], poly[k], poly[k + 1]]) for k in range(1, len(poly) - 1)]


def _rasterize(verts_cam: np.ndarray, triangles: np.ndarray, K: CameraIntrinsics, want_far: bool):
    H, W = K.shape
    near = np.full((H, W), np.inf)
    far = np.full((H, W), -np.inf) if want_far else None
    fx, fy, cx, cy = K.fx, K.fy, K.cx, K.cy

    for tri_idx in triangles:
        for tri in _clip_near(verts_cam[tri_idx]):
            z = tri[:, 2]
            u = fx * tri[:, 0] / z + cx
            v = fy * tri[:, 1] / z + cy
            area = (u[1] - u[0]) * (v[2] - v[0]) - (u[2] - u[0]) * (v[1] - v[0])
            if area == 0 or not np.isfinite(area):
                continue
            if area < 0:
                u = u[[0, 2, 1]]
                v = v[[0, 2, 1]]
                tri = tri[[0, 2, 1]]
                area = -area
            u0 = max(int(math.ceil(u.min() - 0.5)), 0)
            u1 = min(int(math.floor(u.max() + 0.5)), W - 1)
            v0 = max(int(math.ceil(v.min() - 0.5)), 0)
            v1 = min(int(math.floor(v.max() + 0.5)), H - 1)
            if u0 > u1 or v0 > v1:
                continue
            pu = np.arange(u0, u1 + 1, dtype=np.float64)[None, :]
            pv = np.arange(v0, v1 + 1, dtype=np.float64)[:, None]
            inside = np.ones((v1 - v0 + 1, u1 - u0 + 1), dtype=bool)
            for i in range(3):
                ax, ay = u[i], v[i]
                bx, by = u[(i + 1) % 3], v[(i + 1) % 3]
                ex, ey = bx - ax, by - ay
                # Image y points down, so with positive signed area this edge
                # function is >= 0 on the interior side.
                w = ex * (pv - ay) - ey * (pu - ax)
                # Top-left rule: pixels on an edge belong to top or left edges only.
                top_left = (ey < 0) or (ey == 0 and ex > 0)
                inside &= (w > 0) | ((w == 0) & top_left)
            if not inside.any():
                continue
            normal = np.cross(tri[1] - tri[0], tri[2] - tri[0])
            rays_x = (pu - cx) / fx
            rays_y = (pv - cy) / fy
            denom = normal[0] * rays_x + normal[1] * rays_y + normal[2]
            with np.errstate(divide="ignore", invalid="ignore"):
                depth = np.dot(normal, tri[0]) / denom
            ok = inside & np.isfinite(depth) & (depth > 0)
            sub = near[v0:v1 + 1, u0:u1 + 1]
            np.minimum(sub, np.where(ok, depth, np.inf), out=sub)
            if want_far:
                subf = far[v0:v1 + 1, u0:u1 + 1]
                np.maximum(subf, np.where(ok, depth, -np.inf), out=subf)
    return near, far


def sample_surface(mesh: TriangleMesh, spacing: float = 0.01) -> np.ndarray:
    """Deterministic dense surface samples on a barycentric grid per triangle."""
    out = [mesh.vertices]
    tri = mesh.vertices[mesh.triangles]
    edge = np.max(
        np.linalg.norm(tri - np.roll(tri, 1, axis=1), axis=-1), axis=1
    )
    steps = np.maximum(np.ceil(edge / spacing).astype(int), 1)
    for n in np.unique(steps):
        i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
        keep = (i + j) <= n
        a = (i[keep] / n)[:, None]
        b = (j[keep] / n)[:, None]
        sel = tri[steps == n]
        pts = sel[:, None, 0] * (1 - a - b) + sel[:, None, 1] * a + sel[:, None, 2] * b
        out.append(pts.reshape(-1, 3))
    return np.unique(np.vstack(out), axis=0)


def posed_vertices(mesh: TriangleMesh, pose: PoseTransform) -> np.ndarray:
    return pose.apply(mesh.vertices)


def render_depth(mesh: TriangleMesh, pose: PoseTransform, K: CameraIntrinsics) -> RenderResult:
    """Z-buffer render: each covered pixel holds the nearest surface depth."""
    near, _ = _rasterize(posed_vertices(mesh, pose), mesh.triangles, K, want_far=False)
    mask = np.isfinite(near)
    return RenderResult(np.where(mask, near, np.nan), mask)


def render_depth_range(mesh: TriangleMesh, pose: PoseTransform, K: CameraIntrinsics):
    """Per-pixel (near, far) depth over all covering triangles; NaN where uncovered."""
    near, far = _rasterize(posed_vertices(mesh, pose), mesh.triangles, K, want_far=True)
    mask = np.isfinite(near)
    return np.where(mask, near, np.nan), np.where(mask, far, np.nan)


def render_with_range(mesh: TriangleMesh, pose: PoseTransform, K: CameraIntrinsics):
    """Single rasterization pass returning the RenderResult and the (near, far) pair."""
    near, far = render_depth_range(mesh, pose, K)
    return RenderResult(near, np.isfinite(near)), (near, far)


def composite(renders: list[RenderResult], shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Z-buffer composite; returns depth (NaN uncovered) and index of frontmost render (-1)."""
    depth = np.full(shape, np.inf)
    owner = np.full(shape, -1, dtype=np.int64)
    for i, r in enumerate(renders):
        d = np.where(r.mask, r.depth, np.inf)
        closer = d < depth
        depth[closer] = d[closer]
        owner[closer] = i
    return np.where(np.isfinite(depth), depth, np.nan), owner


# Primitive shapes used by the synthetic generator and tests. Model frame has
# the base on y = 0 with the body extending toward -y (up).

def box_mesh(size_x: float, size_y: float, size_z: float, center=(0.0, None, 0.0)) -> TriangleMesh:
    """Axis-aligned box, base centred on the origin unless ``center`` says otherwise."""
    cx, cy, cz = center
    if cy is None:
        cy = -size_y / 2
    hx, hy, hz = size_x / 2, size_y / 2, size_z / 2
    v = np.array(
        [[x, y, z] for x in (-hx, hx) for y in (-hy, hy) for z in (-hz, hz)], dtype=np.float64
    ) + np.array([cx, cy, cz])
    # vertex index = 4*ix + 2*iy + iz
    faces = [
        (0, 1, 3), (0, 3, 2),  # -x
        (4, 6, 7), (4, 7, 5),  # +x
        (0, 4, 5), (0, 5, 1),  # -y
        (2, 3, 7), (2, 7, 6),  # +y
        (0, 2, 6), (0, 6, 4),  # -z
        (1, 5, 7), (1, 7, 3),  # +z
    ]
    return TriangleMesh(v, np.array(faces))


def extruded_mesh(polygon: np.ndarray, height: float, cap_triangles: np.ndarray) -> TriangleMesh:
    """Prism over an xz polygon (counter-clockwise) from y=0 up to y=-height."""
    polygon = np.asarray(polygon, dtype=np.float64)
    n = len(polygon)
    bottom = np.column_stack([polygon[:, 0], np.zeros(n), polygon[:, 1]])
    top = np.column_stack([polygon[:, 0], np.full(n, -height), polygon[:, 1]])
    verts = np.vstack([bottom, top])
    tris = []
    for a, b, c in cap_triangles:
        tris.append((a, b, c))
        tris.append((n + a, n + c, n + b))
    for i in range(n):
        j = (i + 1) % n
        tris.append((i, j, n + j))
        tris.append((i, n + j, n + i))
    return TriangleMesh(verts, np.array(tris))


def cylinder_mesh(radius: float, height: float, segments: int = 16) -> TriangleMesh:
    ang = np.linspace(0, 2 * np.pi, segments, endpoint=False)
    poly = np.column_stack([radius * np.cos(ang), radius * np.sin(ang)])
    caps = np.array([(0, k, k + 1) for k in range(1, segments - 1)])
    return extruded_mesh(poly, height, caps)


def l_shape_mesh(size_x: float, size_z: float, height: float, notch: float = 0.5) -> TriangleMesh:
    """L-shaped prism; ``notch`` is the fraction removed from the +x/+z corner."""
    hx, hz = size_x / 2, size_z / 2
    nx, nz = -hx + size_x * (1 - notch), -hz + size_z * (1 - notch)
    poly = np.array([[-hx, -hz], [hx, -hz], [hx, nz], [nx, nz], [nx, hz], [-hx, hz]])
    # Fan from the reflex vertex (index 3) sees every other vertex.
    caps = np.array([(3, 4, 5), (3, 5, 0), (3, 0, 1), (3, 1, 2)])
    return extruded_mesh(poly, height, caps)
