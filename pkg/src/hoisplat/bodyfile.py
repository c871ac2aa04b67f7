"""Body-model file format (JSON) and the bundled toy humanoid generator.

The file stores the skeleton, canonical anchors with sparse skinning triplets
and part labels, an optional linear shape basis, and the vertex tables that
tie the body to its base mesh (vertex skinning triplets plus the
anchor->vertex map used by contact conversion).
"""

from __future__ import annotations

import json

import numpy as np

from .errors import FormatError
from .meshes import TriMesh
from .scene import BodyModel

BODY_FORMAT = "hoisplat-body"
BODY_VERSION = "1.0"


def _weights_to_triplets(weights: np.ndarray) -> list:
    rows, cols = np.nonzero(weights)
    return [[int(r), int(c), float(weights[r, c])] for r, c in zip(rows, cols)]


def _triplets_to_weights(triplets, n_rows: int, n_cols: int, what: str) -> np.ndarray:
    w = np.zeros((n_rows, n_cols))
    for item in triplets:
        if len(item) != 3:
            raise FormatError(f"{what}: triplet must be [row, col, weight], got {item}")
        r, c, val = int(item[0]), int(item[1]), float(item[2])
        if not (0 <= r < n_rows and 0 <= c < n_cols):
            raise FormatError(f"{what}: triplet index ({r}, {c}) out of range")
        w[r, c] += val
    return w


def save_body(body: BodyModel, path) -> None:
    doc = {
        "format": BODY_FORMAT,
        "version": BODY_VERSION,
        "joints": body.joints.tolist(),
        "parents": body.parents.tolist(),
        "joint_names": list(body.joint_names) if body.joint_names else None,
        "anchors": body.anchors.tolist(),
        "part_labels": list(body.part_labels),
        "skin_weights": _weights_to_triplets(body.skin_weights),
        "shape_basis": None
        if body.shape_basis is None
        else {"shape": list(body.shape_basis.shape), "values": body.shape_basis.ravel().tolist()},
        "vertex_weights": None
        if body.vertex_weights is None
        else {"rows": int(body.vertex_weights.shape[0]), "triplets": _weights_to_triplets(body.vertex_weights)},
        "vertex_shape_basis": None
        if body.vertex_shape_basis is None
        else {"shape": list(body.vertex_shape_basis.shape), "values": body.vertex_shape_basis.ravel().tolist()},
        "anchor_vertex_map": None if body.anchor_vertex_map is None else body.anchor_vertex_map.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_body(path) -> BodyModel:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(doc, dict) or doc.get("format") != BODY_FORMAT:
        raise FormatError(f"{path}: not a {BODY_FORMAT} file")
    major = str(doc.get("version", "0")).split(".")[0]
    if major != BODY_VERSION.split(".")[0]:
        raise FormatError(f"{path}: unsupported body format version {doc.get('version')}")
    for key in ("joints", "parents", "anchors", "part_labels", "skin_weights"):
        if key not in doc:
            raise FormatError(f"{path}: missing required key {key!r}")
    joints = np.array(doc["joints"], dtype=float)
    anchors = np.array(doc["anchors"], dtype=float)
    weights = _triplets_to_weights(doc["skin_weights"], len(anchors), len(joints), "skin_weights")

    def dense(entry, what):
        if entry is None:
            return None
        shape = tuple(int(s) for s in entry["shape"])
        values = np.array(entry["values"], dtype=float)
        if values.size != int(np.prod(shape)):
            raise FormatError(f"{path}: {what} has {values.size} values, shape {shape} expects {np.prod(shape)}")
        return values.reshape(shape)

    vw_entry = doc.get("vertex_weights")
    vertex_weights = None
    if vw_entry is not None:
        vertex_weights = _triplets_to_weights(
            vw_entry["triplets"], int(vw_entry["rows"]), len(joints), "vertex_weights"
        )
    try:
        return BodyModel(
            joints=joints,
            parents=np.array(doc["parents"], dtype=int),
            anchors=anchors,
            skin_weights=weights,
            part_labels=tuple(doc["part_labels"]),
            shape_basis=dense(doc.get("shape_basis"), "shape_basis"),
            joint_names=tuple(doc["joint_names"]) if doc.get("joint_names") else None,
            vertex_weights=vertex_weights,
            vertex_shape_basis=dense(doc.get("vertex_shape_basis"), "vertex_shape_basis"),
            anchor_vertex_map=None
            if doc.get("anchor_vertex_map") is None
            else np.array(doc["anchor_vertex_map"], dtype=int),
        )
    except (TypeError, KeyError) as e:
        raise FormatError(f"{path}: malformed body file ({e})") from None


# ---------------------------------------------------------------------------
# Toy humanoid

_JOINTS = [
    ("pelvis", (0.0, 0.0, 0.0), -1),
    ("spine", (0.0, 0.25, 0.0), 0),
    ("neck", (0.0, 0.50, 0.0), 1),
    ("head", (0.0, 0.62, 0.0), 2),
    ("l_shoulder", (0.18, 0.45, 0.0), 1),
    ("r_shoulder", (-0.18, 0.45, 0.0), 1),
    ("l_elbow", (0.44, 0.45, 0.0), 4),
    ("r_elbow", (-0.44, 0.45, 0.0), 5),
    ("l_wrist", (0.68, 0.45, 0.0), 6),
    ("r_wrist", (-0.68, 0.45, 0.0), 7),
    ("l_hip", (0.09, -0.05, 0.0), 0),
    ("r_hip", (-0.09, -0.05, 0.0), 0),
    ("l_knee", (0.09, -0.45, 0.0), 10),
    ("r_knee", (-0.09, -0.45, 0.0), 11),
    ("l_ankle", (0.09, -0.85, 0.0), 12),
    ("r_ankle", (-0.09, -0.85, 0.0), 13),
]
SPINE_JOINT_INDEX = 1

# label, driving joint, segment start, segment end, radius, (rings, around)
_SEGMENTS = [
    ("hips", 0, (0.0, -0.10, 0.0), (0.0, 0.08, 0.0), 0.13, (3, 8)),
    ("torso", 1, (0.0, 0.12, 0.0), (0.0, 0.48, 0.0), 0.12, (5, 8)),
    ("neck", 2, (0.0, 0.50, 0.0), (0.0, 0.58, 0.0), 0.045, (2, 5)),
    ("head", 3, (0.0, 0.60, 0.0), (0.0, 0.76, 0.0), 0.085, (4, 7)),
    ("left upper arm", 4, (0.20, 0.45, 0.0), (0.42, 0.45, 0.0), 0.045, (3, 6)),
    ("right upper arm", 5, (-0.20, 0.45, 0.0), (-0.42, 0.45, 0.0), 0.045, (3, 6)),
    ("left forearm", 6, (0.44, 0.45, 0.0), (0.66, 0.45, 0.0), 0.038, (3, 5)),
    ("right forearm", 7, (-0.44, 0.45, 0.0), (-0.66, 0.45, 0.0), 0.038, (3, 5)),
    ("left hand", 8, (0.68, 0.45, 0.0), (0.80, 0.45, 0.0), 0.035, (3, 5)),
    ("right hand", 9, (-0.68, 0.45, 0.0), (-0.80, 0.45, 0.0), 0.035, (3, 5)),
    ("left thigh", 10, (0.09, -0.08, 0.0), (0.09, -0.43, 0.0), 0.068, (4, 6)),
    ("right thigh", 11, (-0.09, -0.08, 0.0), (-0.09, -0.43, 0.0), 0.068, (4, 6)),
    ("left shin", 12, (0.09, -0.47, 0.0), (0.09, -0.83, 0.0), 0.05, (4, 5)),
    ("right shin", 13, (-0.09, -0.47, 0.0), (-0.09, -0.83, 0.0), 0.05, (4, 5)),
    ("left foot", 14, (0.09, -0.88, 0.02), (0.09, -0.90, 0.14), 0.04, (2, 5)),
    ("right foot", 15, (-0.09, -0.88, 0.02), (-0.09, -0.90, 0.14), 0.04, (2, 5)),
]


def _segment_frame(start: np.ndarray, end: np.ndarray):
    axis = end - start
    length = np.linalg.norm(axis)
    axis = axis / length
    helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(axis, helper)
    u /= np.linalg.norm(u)
    v = np.cross(axis, u)
    return axis, u, v, length


def _segment_points(start, end, radius, rings, around):
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    axis, u, v, length = _segment_frame(start, end)
    pts, ts = [], []
    for ri in range(rings):
        t = (ri + 0.5) / rings
        center = start + t * length * axis
        for ai in range(around):
            ang = 2.0 * np.pi * (ai + 0.5 * (ri % 2)) / around
            pts.append(center + radius * (np.cos(ang) * u + np.sin(ang) * v))
            ts.append(t)
    return np.array(pts), np.array(ts)


def _blend_weight(t: np.ndarray) -> np.ndarray:
    """Share assigned to the parent joint near the segment start."""
    return np.clip(0.5 - 2.0 * t, 0.0, 0.5)


def _segment_tube(start, end, radius, rings, around, v_offset):
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    axis, u, v, length = _segment_frame(start, end)
    verts, ts = [], []
    grid = np.zeros((rings + 1, around), dtype=int)
    for ri in range(rings + 1):
        t = ri / rings
        center = start + t * length * axis
        for ai in range(around):
            ang = 2.0 * np.pi * ai / around
            grid[ri, ai] = v_offset + len(verts)
            verts.append(center + radius * (np.cos(ang) * u + np.sin(ang) * v))
            ts.append(t)
    faces = []
    for ri in range(rings):
        for ai in range(around):
            an = (ai + 1) % around
            a, b = grid[ri, ai], grid[ri, an]
            c, d = grid[ri + 1, ai], grid[ri + 1, an]
            faces.append([a, b, d])
            faces.append([a, d, c])
    return np.array(verts), np.array(ts), faces


def toy_body() -> tuple[BodyModel, TriMesh]:
    """A ~300-anchor, 16-joint synthetic humanoid plus its low-poly base mesh."""
    joints = np.array([j for _, j, _ in _JOINTS])
    parents = np.array([p for _, _, p in _JOINTS])
    names = tuple(n for n, _, _ in _JOINTS)
    n_joints = len(joints)

    anchors, labels, weight_rows = [], [], []
    mesh_verts, mesh_faces, mesh_v_weights = [], [], []
    for label, joint, start, end, radius, (rings, around) in _SEGMENTS:
        pts, ts = _segment_points(start, end, radius, rings, around)
        anchors.append(pts)
        labels += [label] * len(pts)
        parent = parents[joint]
        for t in ts:
            row = np.zeros(n_joints)
            wp = _blend_weight(np.array([t]))[0] if parent >= 0 else 0.0
            row[joint] = 1.0 - wp
            if parent >= 0:
                row[parent] = wp
            weight_rows.append(row)

        offset = sum(len(m) for m in mesh_verts)
        tube_v, tube_t, tube_f = _segment_tube(start, end, radius, rings, max(around, 5), offset)
        mesh_verts.append(tube_v)
        mesh_faces += tube_f
        for t in tube_t:
            row = np.zeros(n_joints)
            wp = _blend_weight(np.array([t]))[0] if parent >= 0 else 0.0
            row[joint] = 1.0 - wp
            if parent >= 0:
                row[parent] = wp
            mesh_v_weights.append(row)

    anchors = np.concatenate(anchors)
    skin_weights = np.stack(weight_rows)
    verts = np.concatenate(mesh_verts)
    vertex_weights = np.stack(mesh_v_weights)

    # radial "bulk" shape direction: one beta coefficient, 5 cm per unit
    def radial(points):
        out = np.array(points)
        out[:, 1] = 0.0
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        return 0.05 * out / np.maximum(norms, 1e-6)

    shape_basis = radial(anchors)[:, :, None]
    vertex_shape_basis = radial(verts)[:, :, None]

    from scipy.spatial import cKDTree

    anchor_vertex_map = cKDTree(verts).query(anchors)[1]

    skin_tone = np.array([0.85, 0.65, 0.55])
    colors = np.clip(skin_tone[None, :] + 0.25 * (verts[:, 1:2] - 0.0), 0.05, 0.95)

    body = BodyModel(
        joints=joints,
        parents=parents,
        anchors=anchors,
        skin_weights=skin_weights,
        part_labels=tuple(labels),
        shape_basis=shape_basis,
        joint_names=names,
        vertex_weights=vertex_weights,
        vertex_shape_basis=vertex_shape_basis,
        anchor_vertex_map=anchor_vertex_map,
    )
    base_mesh = TriMesh(verts, np.array(mesh_faces, dtype=int), colors)
    return body, base_mesh
