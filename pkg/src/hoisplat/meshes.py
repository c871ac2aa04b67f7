"""Triangle meshes, mesh<->Gaussian conversions, and the contact-consistent
object-mesh shift applied after optimization.

Geometric predicates used elsewhere (generalized winding number, point-to-
surface closest points, ray-cast parity fallback) also live here.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionError, FormatError, InvariantError, ValidationError
from .scene import BodyModel, GaussianSet, Scene, pose_mesh_vertices, transform_points

_DEGENERATE_AREA = 1e-12


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray  # (V, 3) meters
    faces: np.ndarray  # (F, 3) vertex indices
    colors: np.ndarray | None = None  # (V, 3) in [0, 1]

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        f = np.asarray(self.faces, dtype=int)
        if v.ndim != 2 or v.shape[1] != 3:
            raise DimensionError("TriMesh: vertices must be (V, 3)")
        if f.ndim != 2 or f.shape[1] != 3:
            raise DimensionError("TriMesh: faces must be (F, 3)")
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise ValidationError("TriMesh: face indices out of range")
        if len(f):
            areas = triangle_areas(v, f)
            if np.any(areas < _DEGENERATE_AREA):
                raise InvariantError(
                    f"TriMesh: {int(np.sum(areas < _DEGENERATE_AREA))} degenerate faces "
                    f"(area < {_DEGENERATE_AREA} m^2)"
                )
        c = self.colors
        if c is not None:
            c = np.asarray(c, dtype=float)
            if c.shape != v.shape:
                raise DimensionError("TriMesh: colors must match vertices")
            c.flags.writeable = False
            object.__setattr__(self, "colors", c)
        v.flags.writeable = False
        f.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        return TriMesh(vertices, self.faces, self.colors)


def triangle_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a, b, c = (vertices[faces[:, k]] for k in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def is_watertight(mesh: TriMesh) -> bool:
    """Every undirected edge shared by exactly two faces with opposite winding."""
    f = mesh.faces
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    directed = {}
    for e0, e1 in edges:
        key = (int(e0), int(e1))
        directed[key] = directed.get(key, 0) + 1
    if any(v != 1 for v in directed.values()):
        return False
    return all((b, a) in directed for (a, b) in directed)


def winding_numbers(points: np.ndarray, mesh: TriMesh) -> np.ndarray:
    """Generalized winding number of the surface about each query point."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    v = mesh.vertices
    f = mesh.faces
    total = np.zeros(len(points))
    # chunk over points to bound the (P, F) temporaries
    chunk = max(1, int(4_000_000 // max(len(f), 1)))
    for lo in range(0, len(points), chunk):
        p = points[lo : lo + chunk]
        a = v[f[:, 0]][None, :, :] - p[:, None, :]
        b = v[f[:, 1]][None, :, :] - p[:, None, :]
        c = v[f[:, 2]][None, :, :] - p[:, None, :]
        la = np.linalg.norm(a, axis=2)
        lb = np.linalg.norm(b, axis=2)
        lc = np.linalg.norm(c, axis=2)
        numer = np.einsum("pfk,pfk->pf", a, np.cross(b, c))
        denom = (
            la * lb * lc
            + np.einsum("pfk,pfk->pf", a, b) * lc
            + np.einsum("pfk,pfk->pf", b, c) * la
            + np.einsum("pfk,pfk->pf", c, a) * lb
        )
        omega = 2.0 * np.arctan2(numer, denom)
        total[lo : lo + chunk] = omega.sum(axis=1) / (4.0 * np.pi)
    return total


def ray_cast_parity(points: np.ndarray, mesh: TriMesh, direction=(0.57735, 0.57735, 0.57735)) -> np.ndarray:
    """Crossing-parity containment; fallback when the mesh is not watertight."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    v0 = mesh.vertices[mesh.faces[:, 0]]
    e1 = mesh.vertices[mesh.faces[:, 1]] - v0
    e2 = mesh.vertices[mesh.faces[:, 2]] - v0
    h = np.cross(d, e2)
    det = np.einsum("fk,fk->f", e1, h)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    counts = np.zeros(len(points), dtype=int)
    for i, p in enumerate(points):
        s = p[None, :] - v0
        u = np.einsum("fk,fk->f", s, h) * inv
        q = np.cross(s, e1)
        w = (q @ d) * inv
        t = np.einsum("fk,fk->f", e2, q) * inv
        hit = ok & (u >= 0) & (u <= 1) & (w >= 0) & (u + w <= 1) & (t > 1e-12)
        counts[i] = int(hit.sum())
    return counts % 2 == 1


def points_inside(points: np.ndarray, mesh: TriMesh) -> np.ndarray:
    """Containment test: winding number on watertight meshes, else parity."""
    if is_watertight(mesh):
        return winding_numbers(points, mesh) > 0.5
    warnings.warn("mesh is not watertight; falling back to ray-cast parity containment")
    return ray_cast_parity(points, mesh)


def closest_points_on_mesh(points: np.ndarray, mesh: TriMesh):
    """Closest surface point per query: (closest (P,3), face (P,), bary (P,3), dist (P,)).

    Vectorized Ericson point-triangle test over the full (P, F) grid.
    """
    p = np.atleast_2d(np.asarray(points, dtype=float))
    v = mesh.vertices
    f = mesh.faces
    a = v[f[:, 0]][None, :, :]
    b = v[f[:, 1]][None, :, :]
    c = v[f[:, 2]][None, :, :]
    pp = p[:, None, :]
    ab = b - a
    ac = c - a
    ap = pp - a
    d1 = np.einsum("pfk,pfk->pf", ab, ap)
    d2 = np.einsum("pfk,pfk->pf", ac, ap)
    bp = pp - b
    d3 = np.einsum("pfk,pfk->pf", ab, bp)
    d4 = np.einsum("pfk,pfk->pf", ac, bp)
    cp = pp - c
    d5 = np.einsum("pfk,pfk->pf", ab, cp)
    d6 = np.einsum("pfk,pfk->pf", ac, cp)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    bary_v = np.zeros(d1.shape)
    bary_w = np.zeros(d1.shape)

    # region edges/corners, applied in Ericson's order via masks
    denom_face = va + vb + vc
    with np.errstate(divide="ignore", invalid="ignore"):
        v_face = np.where(denom_face != 0, vb / denom_face, 0.0)
        w_face = np.where(denom_face != 0, vc / denom_face, 0.0)
        v_ab = np.where(d1 - d3 != 0, d1 / (d1 - d3), 0.0)
        w_ac = np.where(d2 - d6 != 0, d2 / (d2 - d6), 0.0)
        t_bc = np.where((d4 - d3) + (d5 - d6) != 0, (d4 - d3) / ((d4 - d3) + (d5 - d6)), 0.0)

    bary_v[:] = v_face
    bary_w[:] = w_face
    m_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    bary_v[m_bc] = 1.0 - t_bc[m_bc]
    bary_w[m_bc] = t_bc[m_bc]
    m_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    bary_v[m_ac] = 0.0
    bary_w[m_ac] = w_ac[m_ac]
    m_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    bary_v[m_ab] = v_ab[m_ab]
    bary_w[m_ab] = 0.0
    m_c = (d6 >= 0) & (d5 <= d6)
    bary_v[m_c] = 0.0
    bary_w[m_c] = 1.0
    m_b = (d3 >= 0) & (d4 <= d3)
    bary_v[m_b] = 1.0
    bary_w[m_b] = 0.0
    m_a = (d1 <= 0) & (d2 <= 0)
    bary_v[m_a] = 0.0
    bary_w[m_a] = 0.0

    closest = a + bary_v[:, :, None] * ab + bary_w[:, :, None] * ac
    dist2 = np.sum((pp - closest) ** 2, axis=2)
    face_idx = np.argmin(dist2, axis=1)
    rows = np.arange(len(p))
    best = closest[rows, face_idx]
    bv = bary_v[rows, face_idx]
    bw = bary_w[rows, face_idx]
    bary = np.stack([1.0 - bv - bw, bv, bw], axis=1)
    return best, face_idx, bary, np.sqrt(dist2[rows, face_idx])


def surface_distances(points: np.ndarray, mesh: TriMesh) -> np.ndarray:
    return closest_points_on_mesh(points, mesh)[3]


# ---------------------------------------------------------------------------
# Conversions


def mesh_to_gaussians(mesh: TriMesh, default_opacity: float = 0.9, default_scale: float | None = None) -> GaussianSet:
    """One isotropic splat per vertex; colors from vertex colors (white if absent).

    When no scale is given, each splat uses half its vertex's mean incident
    edge length.
    """
    if len(mesh.vertices) == 0:
        raise ValidationError("mesh_to_gaussians: mesh has no vertices")
    n = len(mesh.vertices)
    if default_scale is None:
        edge_sum = np.zeros(n)
        edge_cnt = np.zeros(n)
        f = mesh.faces
        for i, j in ((0, 1), (1, 2), (2, 0)):
            lengths = np.linalg.norm(mesh.vertices[f[:, i]] - mesh.vertices[f[:, j]], axis=1)
            np.add.at(edge_sum, f[:, i], lengths)
            np.add.at(edge_cnt, f[:, i], 1)
            np.add.at(edge_sum, f[:, j], lengths)
            np.add.at(edge_cnt, f[:, j], 1)
        mean_edge = np.where(edge_cnt > 0, edge_sum / np.maximum(edge_cnt, 1), 0.05)
        scales = 0.5 * mean_edge[:, None] * np.ones((1, 3))
    else:
        scales = float(default_scale) * np.ones((n, 3))
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    colors = mesh.colors if mesh.colors is not None else np.ones((n, 3))
    return GaussianSet(
        positions=mesh.vertices,
        rotations=rot,
        scales=scales,
        opacities=np.full(n, float(default_opacity)),
        colors=np.clip(colors, 0.0, 1.0),
    )


def extract_posed_meshes(scene: Scene, human_base: TriMesh, object_base: TriMesh) -> tuple[TriMesh, TriMesh]:
    """Pose the base meshes with the scene's optimized parameters.

    The human base is skinned with the body file's vertex table and the
    scene's (pose, shape); the object base gets the similarity transform.
    Topology is unchanged.
    """
    body: BodyModel = scene.body
    if body.vertex_weights is None:
        raise ValidationError("extract_posed_meshes: body file has no vertex skinning table")
    human_verts = pose_mesh_vertices(body, human_base.vertices, scene.human.pose, scene.human.shape)
    object_verts = transform_points(scene.object, object_base.vertices)
    return human_base.with_vertices(human_verts), object_base.with_vertices(object_verts)


def detect_contact_pairs(
    human_gaussians: GaussianSet, object_gaussians: GaussianSet, threshold: float = 0.05
) -> list[tuple[int, int, float]]:
    """Cross pairs with center distance below `threshold`.

    Each human index is paired with its nearest qualifying object index and
    vice versa (union of both directions), which keeps the pair set symmetric
    under swapping the two roles.
    """
    if threshold <= 0:
        raise ValidationError("detect_contact_pairs: threshold must be positive")
    hp = np.asarray(human_gaussians.positions)
    op = np.asarray(object_gaussians.positions)
    pairs: set[tuple[int, int]] = set()
    dists: dict[tuple[int, int], float] = {}
    if len(hp) and len(op):
        tree_o = cKDTree(op)
        d, idx = tree_o.query(hp)
        for h in np.flatnonzero(d < threshold):
            key = (int(h), int(idx[h]))
            pairs.add(key)
            dists[key] = float(d[h])
        tree_h = cKDTree(hp)
        d2, idx2 = tree_h.query(op)
        for o in np.flatnonzero(d2 < threshold):
            key = (int(idx2[o]), int(o))
            pairs.add(key)
            dists[key] = float(d2[o])
    return [(h, o, dists[(h, o)]) for h, o in sorted(pairs)]


def match_pairs_one_to_one(pairs: list[tuple[int, int, float]]) -> list[tuple[int, int, float]]:
    """Greedy nearest-first matching so each index appears in at most one pair."""
    used_h: set[int] = set()
    used_o: set[int] = set()
    out = []
    for h, o, d in sorted(pairs, key=lambda p: (p[2], p[0], p[1])):
        if h in used_h or o in used_o:
            continue
        used_h.add(h)
        used_o.add(o)
        out.append((h, o, d))
    return sorted(out)


def map_pairs_to_vertices(
    pairs: list[tuple[int, int, float]], body: BodyModel
) -> list[tuple[int, int, float]]:
    """Gaussian-index pairs -> (human vertex, object vertex, distance) pairs.

    Human splats map through the body file's precomputed anchor->vertex table;
    object splats were created one-per-vertex so they map by identity. Several
    splats can share a base vertex, so callers matching for contact_shift
    should run match_pairs_one_to_one on the result.
    """
    if body.anchor_vertex_map is None:
        raise ValidationError("body file has no anchor_vertex_map; cannot map contacts to mesh vertices")
    return [(int(body.anchor_vertex_map[h]), int(o), float(d)) for h, o, d in pairs]


def contact_shift(
    human_mesh: TriMesh, object_mesh: TriMesh, pairs: list[tuple[int, int]]
) -> TriMesh:
    """Locally shift the object mesh so every paired vertex distance closes to 0.

    `pairs` are (human vertex index, object vertex index). The shift field is
    an inverse-square-distance blend of the per-pair displacements, tapered to
    exactly zero beyond twice the contact-patch radius; paired vertices land
    exactly on their targets and the human mesh is never touched.
    """
    if not pairs:
        return object_mesh
    targets: dict[int, list[np.ndarray]] = {}
    for h, o in pairs:
        if not (0 <= h < len(human_mesh.vertices)) or not (0 <= o < len(object_mesh.vertices)):
            raise ValidationError("contact_shift: pair references out-of-range vertices")
        targets.setdefault(int(o), []).append(human_mesh.vertices[h])
    o_idx = np.array(sorted(targets), dtype=int)
    goal = np.zeros((len(o_idx), 3))
    for row, o in enumerate(o_idx):
        pts = np.stack(targets[o])
        if len(pts) > 1:
            spread = np.max(np.linalg.norm(pts - pts.mean(axis=0), axis=1))
            if spread > 0.01:
                warnings.warn(
                    f"contact_shift: object vertex {o} pulled to targets {2 * spread:.3f} m apart; averaging"
                )
        goal[row] = pts.mean(axis=0)

    anchors = object_mesh.vertices[o_idx]
    disp = goal - anchors
    centroid = anchors.mean(axis=0)
    patch_radius = float(np.max(np.linalg.norm(anchors - centroid, axis=1)))
    support = 2.0 * patch_radius

    verts = np.array(object_mesh.vertices)
    dist = np.linalg.norm(verts[:, None, :] - anchors[None, :, :], axis=2)  # (V, K)
    dmin = dist.min(axis=1)
    if support > 0:
        taper = np.clip(1.0 - dmin / support, 0.0, 1.0)
    else:
        taper = np.zeros(len(verts))
    inv2 = 1.0 / np.maximum(dist, 1e-150) ** 2
    blend = (inv2 @ disp) / inv2.sum(axis=1, keepdims=True)
    moved = taper > 0.0
    verts[moved] = verts[moved] + taper[moved, None] * blend[moved]
    verts[o_idx] = goal  # exact closure regardless of blending arithmetic
    return TriMesh(verts, object_mesh.faces, object_mesh.colors)


# ---------------------------------------------------------------------------
# Mesh file IO (OBJ with optional vertex-color extension, binary PLY)


def save_obj(mesh: TriMesh, path) -> None:
    """OBJ writer; vertex colors use the common 'v x y z r g b' extension."""
    with open(path, "w") as fh:
        fh.write("# hoisplat mesh\n")
        for i, v in enumerate(mesh.vertices):
            if mesh.colors is not None:
                c = mesh.colors[i]
                fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g} {c[0]:.9g} {c[1]:.9g} {c[2]:.9g}\n")
            else:
                fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def load_obj(path) -> TriMesh:
    verts, colors, faces = [], [], []
    has_color = False
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) not in (4, 7):
                    raise FormatError(f"{path}:{lineno}: vertex line needs 3 or 6 numbers")
                try:
                    nums = [float(x) for x in parts[1:]]
                except ValueError as e:
                    raise FormatError(f"{path}:{lineno}: bad vertex number: {e}") from None
                verts.append(nums[:3])
                if len(nums) == 6:
                    has_color = True
                    colors.append(nums[3:])
                else:
                    colors.append([1.0, 1.0, 1.0])
            elif parts[0] == "f":
                if len(parts) < 4:
                    raise FormatError(f"{path}:{lineno}: face line needs 3 indices")
                try:
                    idx = [int(p.split("/")[0]) - 1 for p in parts[1:4]]
                except ValueError as e:
                    raise FormatError(f"{path}:{lineno}: bad face index: {e}") from None
                faces.append(idx)
    if not verts:
        raise FormatError(f"{path}: no vertices found")
    return TriMesh(
        np.array(verts, dtype=float),
        np.array(faces, dtype=int).reshape(-1, 3),
        np.array(colors) if has_color else None,
    )


def save_mesh_ply(mesh: TriMesh, path) -> None:
    n_v, n_f = len(mesh.vertices), len(mesh.faces)
    has_color = mesh.colors is not None
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n_v}"]
    header += ["property float x", "property float y", "property float z"]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header += [f"element face {n_f}", "property list uchar int vertex_indices", "end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if has_color:
            vdt = np.dtype([("xyz", "<f4", 3), ("rgb", "u1", 3)])
            data = np.empty(n_v, dtype=vdt)
            data["xyz"] = mesh.vertices.astype("<f4")
            data["rgb"] = np.clip(np.round(mesh.colors * 255.0), 0, 255).astype("u1")
        else:
            data = mesh.vertices.astype("<f4")
        fh.write(data.tobytes())
        fdt = np.dtype([("count", "u1"), ("idx", "<i4", 3)])
        fdata = np.empty(n_f, dtype=fdt)
        fdata["count"] = 3
        fdata["idx"] = mesh.faces.astype("<i4")
        fh.write(fdata.tobytes())


def load_mesh_ply(path) -> TriMesh:
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    body = raw[end + len(b"end_header\n"):]
    if "format binary_little_endian 1.0" not in header[1]:
        raise FormatError(f"{path}: only binary_little_endian PLY is supported")
    n_v = n_f = 0
    v_props = []
    section = None
    for line in header[2:]:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n_v = int(parts[2])
            section = "vertex"
        elif parts[:2] == ["element", "face"]:
            n_f = int(parts[2])
            section = "face"
        elif parts[0] == "property" and section == "vertex":
            v_props.append((parts[1], parts[2]))
    names = [n for _, n in v_props]
    if names[:3] != ["x", "y", "z"]:
        raise FormatError(f"{path}: vertex properties must start with x, y, z (got {names})")
    has_color = names[3:6] == ["red", "green", "blue"]
    if has_color:
        vdt = np.dtype([("xyz", "<f4", 3), ("rgb", "u1", 3)])
    elif len(names) == 3:
        vdt = np.dtype([("xyz", "<f4", 3)])
    else:
        raise FormatError(f"{path}: unsupported vertex layout {names}")
    v_bytes = vdt.itemsize * n_v
    try:
        vdata = np.frombuffer(body[:v_bytes], dtype=vdt, count=n_v)
        fdt = np.dtype([("count", "u1"), ("idx", "<i4", 3)])
        fdata = np.frombuffer(body[v_bytes : v_bytes + fdt.itemsize * n_f], dtype=fdt, count=n_f)
    except ValueError as e:
        raise FormatError(f"{path}: truncated PLY payload ({e})") from None
    if len(fdata) and np.any(fdata["count"] != 3):
        raise FormatError(f"{path}: only triangle faces are supported")
    return TriMesh(
        vdata["xyz"].astype(float),
        fdata["idx"].astype(int),
        vdata["rgb"].astype(float) / 255.0 if has_color else None,
    )
