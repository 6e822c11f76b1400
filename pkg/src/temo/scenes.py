"""Small procedural meshes used by the toy runs and tests."""
from __future__ import annotations

import numpy as np

from .geometry import Mesh


def icosphere(subdivisions: int = 2, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> Mesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts) * radius + np.asarray(center, dtype=float)
    return Mesh(v, np.array(faces))


def merge_meshes(*meshes: Mesh) -> Mesh:
    verts, faces, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        offset += m.n_vertices
    return Mesh(np.vstack(verts), np.vstack(faces))


def two_sphere_mesh(separation: float = 1.1, radius: float = 0.45, subdivisions: int = 2) -> Mesh:
    """Two equal spheres on the x axis, left (-x) first in face order."""
    left = icosphere(subdivisions, radius, (-separation / 2.0, 0.0, 0.0))
    right = icosphere(subdivisions, radius, (separation / 2.0, 0.0, 0.0))
    return merge_meshes(left, right)


def unit_quad(z: float = 0.0) -> Mesh:
    """Square [-1, 1]^2 at height z, normal +z."""
    v = np.array([[-1, -1, z], [1, -1, z], [1, 1, z], [-1, 1, z]], dtype=float)
    return Mesh(v, np.array([[0, 1, 2], [0, 2, 3]]))
