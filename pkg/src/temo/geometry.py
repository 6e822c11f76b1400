"""Mesh ingestion, camera sampling and ray casting.

Faces are stored 0-based internally; OBJ files are 1-based on disk (negative
indices are resolved relative to the vertex count at that line).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numba
import numpy as np

RAY_EPS = 1e-8


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    face_normals: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        f = np.ascontiguousarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3 or len(v) == 0:
            raise MeshError("mesh needs at least one 3D vertex")
        if f.ndim != 2 or f.shape[1] != 3 or len(f) == 0:
            raise MeshError("mesh needs at least one triangle")
        if f.min() < 0 or f.max() >= len(v):
            raise MeshError(f"face index out of range for {len(v)} vertices")
        cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        length = np.linalg.norm(cross, axis=1)
        if np.any(length <= 0):
            bad = int(np.argmax(length <= 0))
            raise MeshError(f"degenerate (zero-area) face {bad}")
        v.setflags(write=False)
        f.setflags(write=False)
        normals = cross / length[:, None]
        normals.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "face_normals", normals)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def triangles(self) -> np.ndarray:
        """Face corner positions, shape (u, 3, 3)."""
        return self.vertices[self.faces]


def load_mesh(path) -> Mesh:
    """Read a Wavefront OBJ file; polygons are fan-triangulated, vn/vt ignored."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"mesh file not found: {path}")
    verts, faces = [], []
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            tag = parts[0]
            try:
                if tag == "v":
                    if len(parts) < 4:
                        raise ValueError("vertex needs 3 coordinates")
                    verts.append([float(x) for x in parts[1:4]])
                elif tag == "f":
                    idx = []
                    for tok in parts[1:]:
                        i = int(tok.split("/")[0])
                        i = i - 1 if i > 0 else len(verts) + i
                        if i < 0 or i >= len(verts):
                            raise ValueError(f"face index {tok} out of range ({len(verts)} vertices)")
                        idx.append(i)
                    if len(idx) < 3:
                        raise ValueError("face needs at least 3 vertices")
                    for j in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[j], idx[j + 1]])
            except ValueError as exc:
                raise MeshError(f"{path}:{lineno}: {exc}") from exc
    if not verts or not faces:
        raise MeshError(f"{path}: empty mesh")
    return Mesh(np.array(verts), np.array(faces))


def save_obj(mesh: Mesh, path) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write("v {!r} {!r} {!r}\n".format(*map(float, v)))
        for f in mesh.faces + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


def normalize_unit_sphere(mesh: Mesh) -> Mesh:
    """Center on the vertex centroid and scale so the farthest vertex has norm 1."""
    v = mesh.vertices - mesh.vertices.mean(axis=0)
    scale = np.linalg.norm(v, axis=1).max()
    if scale <= 1e-12:
        raise MeshError("cannot normalize: all vertices coincide")
    return Mesh(v / scale, mesh.faces)


# --------------------------------------------------------------------------
# cameras


@dataclass(frozen=True)
class CameraPose:
    position: np.ndarray
    look_at: np.ndarray = field(default_factory=lambda: np.zeros(3))
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    fov_deg: float = 45.0

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64)
        target = np.asarray(self.look_at, dtype=np.float64)
        up = np.asarray(self.up, dtype=np.float64)
        forward = target - pos
        if np.linalg.norm(forward) < 1e-12:
            raise ValueError("camera position coincides with look_at")
        forward = forward / np.linalg.norm(forward)
        up = up / np.linalg.norm(up)
        if np.linalg.norm(np.cross(forward, up)) < 1e-6:
            up = np.array([0.0, 0.0, 1.0]) if abs(forward[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "look_at", target)
        object.__setattr__(self, "up", up)

    def basis(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(right, true_up, forward) orthonormal camera frame."""
        forward = self.look_at - self.position
        forward = forward / np.linalg.norm(forward)
        right = np.cross(forward, self.up)
        right /= np.linalg.norm(right)
        true_up = np.cross(right, forward)
        return right, true_up, forward

    def ray_directions(self, height: int, width: int) -> np.ndarray:
        """Unit ray directions through pixel centers, shape (H, W, 3), row 0 at the top."""
        right, true_up, forward = self.basis()
        half = np.tan(np.radians(self.fov_deg) / 2.0)
        aspect = width / height
        xs = ((np.arange(width) + 0.5) / width * 2.0 - 1.0) * half * aspect
        ys = (1.0 - (np.arange(height) + 0.5) / height * 2.0) * half
        d = forward + xs[None, :, None] * right + ys[:, None, None] * true_up
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


def sample_camera_poses(rng_seed, count: int, mean_radius: float = 3.0, sigma: float = 0.3,
                        fov_deg: float = 45.0, min_radius: float = 1.05) -> list:
    """Gaussian camera positions around the origin, all looking at it.

    position = mean_radius * unit(g1) + sigma * g2 with g1, g2 standard normal;
    draws landing inside ``min_radius`` are rejected and redrawn.
    ``rng_seed`` may be an int or a ``numpy.random.Generator``.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if mean_radius <= 1.0:
        raise ValueError("mean_radius must exceed 1 (outside the unit sphere)")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    poses = []
    while len(poses) < count:
        g1 = rng.standard_normal(3)
        g2 = rng.standard_normal(3)
        n1 = np.linalg.norm(g1)
        if n1 < 1e-9:
            continue
        pos = mean_radius * g1 / n1 + sigma * g2
        if np.linalg.norm(pos) < min_radius:
            continue
        poses.append(CameraPose(pos, fov_deg=fov_deg))
    return poses


def orbit_poses(count: int = 8, radius: float = 3.0, elevation_deg: float = 30.0,
                fov_deg: float = 45.0) -> list:
    """Azimuthal ring of cameras spaced 360/count degrees, starting on +z."""
    el = np.radians(elevation_deg)
    poses = []
    for k in range(count):
        az = 2.0 * np.pi * k / count
        pos = radius * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
        poses.append(CameraPose(pos, fov_deg=fov_deg))
    return poses


# --------------------------------------------------------------------------
# ray casting


def ray_triangle_intersect(origin, direction, tri) -> Optional[Tuple[float, np.ndarray]]:
    """Determinant-based (Moller-Trumbore) ray/triangle test, backface-agnostic.

    Returns ``(t, (w0, w1, w2))`` for the hit point ``w0*a + w1*b + w2*c`` or
    None on a miss, a parallel ray, or ``t <= 1e-8``.
    """
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    a, b, c = np.asarray(tri, dtype=np.float64)
    e1, e2 = b - a, c - a
    p = np.cross(d, e2)
    det = e1 @ p
    if abs(det) < RAY_EPS:
        return None
    inv = 1.0 / det
    s = o - a
    u = (s @ p) * inv
    if u < 0.0 or u > 1.0:
        return None
    q = np.cross(s, e1)
    v = (d @ q) * inv
    if v < 0.0 or u + v > 1.0:
        return None
    t = (e2 @ q) * inv
    if t <= RAY_EPS:
        return None
    return float(t), np.array([1.0 - u - v, u, v])


@numba.njit(cache=True)
def _cast(origin, dirs, v0, e1, e2, t_out, face_out):
    n_rays = dirs.shape[0]
    n_faces = v0.shape[0]
    for r in range(n_rays):
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        best_t = np.inf
        best_f = -1
        for f in range(n_faces):
            px = dy * e2[f, 2] - dz * e2[f, 1]
            py = dz * e2[f, 0] - dx * e2[f, 2]
            pz = dx * e2[f, 1] - dy * e2[f, 0]
            det = e1[f, 0] * px + e1[f, 1] * py + e1[f, 2] * pz
            if abs(det) < 1e-8:
                continue
            inv = 1.0 / det
            sx = origin[0] - v0[f, 0]
            sy = origin[1] - v0[f, 1]
            sz = origin[2] - v0[f, 2]
            u = (sx * px + sy * py + sz * pz) * inv
            if u < 0.0 or u > 1.0:
                continue
            qx = sy * e1[f, 2] - sz * e1[f, 1]
            qy = sz * e1[f, 0] - sx * e1[f, 2]
            qz = sx * e1[f, 1] - sy * e1[f, 0]
            v = (dx * qx + dy * qy + dz * qz) * inv
            if v < 0.0 or u + v > 1.0:
                continue
            t = (e2[f, 0] * qx + e2[f, 1] * qy + e2[f, 2] * qz) * inv
            if t > 1e-8 and t < best_t:
                best_t = t
                best_f = f
        t_out[r] = best_t
        face_out[r] = best_f


def cast_rays(mesh: Mesh, origin, dirs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest hit over all faces for rays sharing ``origin``.

    Returns ``(t, face_id)`` with ``t=inf`` and ``face_id=-1`` on a miss; ties
    on ``t`` keep the lowest face index.  Rays are independent, so callers may
    split ``dirs`` across workers freely.
    """
    tri = mesh.triangles()
    v0 = np.ascontiguousarray(tri[:, 0])
    e1 = np.ascontiguousarray(tri[:, 1] - tri[:, 0])
    e2 = np.ascontiguousarray(tri[:, 2] - tri[:, 0])
    flat = np.ascontiguousarray(dirs.reshape(-1, 3), dtype=np.float64)
    t = np.empty(len(flat))
    face = np.empty(len(flat), dtype=np.int64)
    _cast(np.asarray(origin, dtype=np.float64), flat, v0, e1, e2, t, face)
    return t.reshape(dirs.shape[:-1]), face.reshape(dirs.shape[:-1])


@dataclass(frozen=True)
class IntersectionBuffer:
    """Per-pixel first-hit records for one view; arrays are (H, W[, 3]).

    Miss pixels carry ``face_id=-1``, ``ray_t=inf`` and zero point/normal.
    """

    origin: np.ndarray
    hit: np.ndarray
    points: np.ndarray
    normals: np.ndarray
    face_id: np.ndarray
    view_dirs: np.ndarray
    ray_t: np.ndarray

    @property
    def resolution(self) -> Tuple[int, int]:
        return self.hit.shape

    @property
    def n_hits(self) -> int:
        return int(self.hit.sum())

    def hit_index(self) -> np.ndarray:
        """Flat pixel indices of hits in row-major scan order."""
        return np.flatnonzero(self.hit.reshape(-1))

    def hit_points(self) -> np.ndarray:
        return self.points.reshape(-1, 3)[self.hit_index()]

    def hit_normals(self) -> np.ndarray:
        return self.normals.reshape(-1, 3)[self.hit_index()]

    def hit_view_dirs(self) -> np.ndarray:
        return self.view_dirs.reshape(-1, 3)[self.hit_index()]


def render_geometry_pass(mesh: Mesh, pose: CameraPose, resolution) -> Tuple[IntersectionBuffer, np.ndarray]:
    """Cast one ray per pixel and keep the first intersection.

    The normal of a hit pixel is the (unflipped) normal of the intersected face.
    Returns the buffer and the boolean hit map.
    """
    height, width = resolution
    dirs = pose.ray_directions(height, width)
    t, face = cast_rays(mesh, pose.position, dirs)
    hit = face >= 0
    points = np.zeros((height, width, 3))
    normals = np.zeros((height, width, 3))
    points[hit] = pose.position + t[hit][:, None] * dirs[hit]
    normals[hit] = mesh.face_normals[face[hit]]
    buf = IntersectionBuffer(pose.position.copy(), hit, points, normals, face, dirs, t)
    return buf, hit.copy()


def save_hitmap_png(hitmap: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(hitmap, dtype=bool)).convert("1").save(path)
