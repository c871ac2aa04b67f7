"""Watertight parametric test objects: cube, sphere, frisbee disc.

All generators produce outward-oriented triangle meshes suitable for the
winding-number containment test.
"""

from __future__ import annotations

import numpy as np

from .meshes import TriMesh

_CUBE_CORNERS = np.array(
    [
        [-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
        [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1],
    ],
    dtype=float,
)
_CUBE_FACES = np.array(
    [
        [0, 3, 2], [0, 2, 1],  # -z
        [4, 5, 6], [4, 6, 7],  # +z
        [0, 1, 5], [0, 5, 4],  # -y
        [3, 7, 6], [3, 6, 2],  # +y
        [0, 4, 7], [0, 7, 3],  # -x
        [1, 2, 6], [1, 6, 5],  # +x
    ],
    dtype=int,
)


def _subdivide(vertices: np.ndarray, faces: np.ndarray, rounds: int):
    """Midpoint 1-to-4 subdivision with welded edge midpoints."""
    verts = [tuple(v) for v in vertices]
    index = {v: i for i, v in enumerate(verts)}
    tris = [tuple(f) for f in faces]
    for _ in range(rounds):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = tuple((np.array(verts[i]) + np.array(verts[j])) / 2.0)
                if m not in index:
                    index[m] = len(verts)
                    verts.append(m)
                cache[key] = index[m]
            return cache[key]

        new_tris = []
        for a, b, c in tris:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_tris += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
        tris = new_tris
    return np.array(verts, dtype=float), np.array(tris, dtype=int)


def cube_mesh(size: float = 0.2, subdivisions: int = 2, colors: np.ndarray | None = None) -> TriMesh:
    v, f = _subdivide(_CUBE_CORNERS, _CUBE_FACES, subdivisions)
    v = v * (size / 2.0)
    if colors is None:
        colors = 0.5 + 0.5 * (v / np.abs(v).max())  # position-keyed so faces are tellable apart
    return TriMesh(v, f, np.clip(colors, 0, 1))


def sphere_mesh(radius: float = 0.12, subdivisions: int = 2, colors: np.ndarray | None = None) -> TriMesh:
    t = (1.0 + np.sqrt(5.0)) / 2.0
    base = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=float,
    )
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=int,
    )
    v, f = _subdivide(base, faces, subdivisions)
    v = v / np.linalg.norm(v, axis=1, keepdims=True) * radius
    if colors is None:
        colors = 0.5 + 0.5 * v / radius
    return TriMesh(v, f, np.clip(colors, 0, 1))


def disc_mesh(radius: float = 0.14, height: float = 0.035, segments: int = 20,
              colors: np.ndarray | None = None) -> TriMesh:
    theta = np.linspace(0.0, 2.0 * np.pi, segments, endpoint=False)
    ring = np.stack([radius * np.cos(theta), np.zeros(segments), radius * np.sin(theta)], axis=1)
    top = ring + [0, height / 2.0, 0]
    bot = ring + [0, -height / 2.0, 0]
    verts = np.concatenate([[[0, height / 2.0, 0]], [[0, -height / 2.0, 0]], top, bot])
    ct, cb = 0, 1
    it = 2
    ib = 2 + segments
    faces = []
    for k in range(segments):
        kn = (k + 1) % segments
        faces.append([ct, it + kn, it + k])  # top fan, normal +y
        faces.append([cb, ib + k, ib + kn])  # bottom fan, normal -y
        faces.append([it + k, it + kn, ib + kn])  # side
        faces.append([it + k, ib + kn, ib + k])
    verts = np.array(verts, dtype=float)
    if colors is None:
        ang = np.arctan2(verts[:, 2], verts[:, 0])
        colors = np.stack([0.5 + 0.4 * np.cos(ang), 0.3 + 0.3 * np.sin(ang), 0.7 * np.ones(len(verts))], axis=1)
    return TriMesh(verts, np.array(faces, dtype=int), np.clip(colors, 0, 1))


OBJECT_KINDS = ("cube", "sphere", "frisbee-disc")


def make_object_mesh(kind: str, **kwargs) -> TriMesh:
    if kind == "cube":
        return cube_mesh(**kwargs)
    if kind == "sphere":
        return sphere_mesh(**kwargs)
    if kind == "frisbee-disc":
        return disc_mesh(**kwargs)
    raise ValueError(f"unknown object kind {kind!r}; choose from {OBJECT_KINDS}")
