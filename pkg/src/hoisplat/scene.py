"""Scene data model and pose-application transforms.

A scene holds a Gaussian-splat human driven by a rigged body (forward
kinematics + linear blend skinning), a Gaussian-splat object under a
similarity transform, a 2D background, a front camera, and the text-derived
interaction cues. All types are immutable after construction; the transforms
are pure functions with explicit reverse-mode companions (`*_vjp`) used by
the optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionError, InvariantError, ValidationError
from .geometry import (
    axis_angle_to_quat,
    axis_angle_to_quat_vjp,
    quat_multiply,
    quat_multiply_vjp,
    quat_normalize,
    quat_normalize_vjp,
    quat_to_mat,
    quat_to_mat_vjp,
)

PART_VOCABULARY = (
    "head",
    "neck",
    "torso",
    "hips",
    "left upper arm",
    "right upper arm",
    "left forearm",
    "right forearm",
    "left hand",
    "right hand",
    "left thigh",
    "right thigh",
    "left shin",
    "right shin",
    "left foot",
    "right foot",
)

_QUAT_NORM_TOL = 1e-6
_WEIGHT_SUM_TOL = 1e-6


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


def _as_float(a, shape_tail: tuple[int, ...], name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if arr.ndim != 1 + len(shape_tail) or arr.shape[1:] != shape_tail:
        raise DimensionError(f"{name}: expected shape (N, {', '.join(map(str, shape_tail))}), got {arr.shape}")
    return arr


@dataclass(frozen=True)
class GaussianSet:
    """A splat cloud: centers, orientations, per-axis extents, opacity, color."""

    positions: np.ndarray  # (N, 3) meters
    rotations: np.ndarray  # (N, 4) unit quaternions, (w, x, y, z)
    scales: np.ndarray  # (N, 3) per-axis std-dev, meters
    opacities: np.ndarray  # (N,) in [0, 1]
    colors: np.ndarray  # (N, 3) RGB in [0, 1]

    def __post_init__(self):
        pos = _as_float(self.positions, (3,), "positions")
        n = len(pos)
        rot = _as_float(self.rotations, (4,), "rotations")
        sc = _as_float(self.scales, (3,), "scales")
        op = np.asarray(self.opacities, dtype=float).reshape(-1)
        col = _as_float(self.colors, (3,), "colors")
        if not (len(rot) == len(sc) == len(op) == len(col) == n):
            raise DimensionError("GaussianSet: attribute lists must have equal length")
        if n:
            norms = np.linalg.norm(rot, axis=1)
            if np.any(np.abs(norms - 1.0) > _QUAT_NORM_TOL):
                raise InvariantError("GaussianSet: rotations must be unit quaternions (|q| within 1e-6)")
            if np.any(sc <= 0.0):
                raise InvariantError("GaussianSet: scales must be strictly positive")
            if np.any((op < 0.0) | (op > 1.0)):
                raise InvariantError("GaussianSet: opacities must lie in [0, 1]")
            if np.any((col < 0.0) | (col > 1.0)):
                raise InvariantError("GaussianSet: color channels must lie in [0, 1]")
            if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(sc))):
                raise InvariantError("GaussianSet: positions and scales must be finite")
        for name, arr in (("positions", pos), ("rotations", rot), ("scales", sc),
                          ("opacities", op), ("colors", col)):
            object.__setattr__(self, name, _freeze(arr))

    def __len__(self) -> int:
        return len(self.positions)


def validate_gaussian_set(gs: GaussianSet) -> None:
    """Re-run the GaussianSet invariants (construction already enforces them)."""
    GaussianSet(gs.positions, gs.rotations, gs.scales, gs.opacities, gs.colors)


@dataclass(frozen=True)
class BodyModel:
    """Rigged-body description: skeleton, canonical anchors, skinning tables.

    The optional vertex tables drive the base-mesh posing used by the
    mesh conversion step; they must agree with the bundled base mesh.
    """

    joints: np.ndarray  # (J, 3) rest-pose joint positions
    parents: np.ndarray  # (J,) parent index, root = -1
    anchors: np.ndarray  # (A, 3) canonical anchor positions
    skin_weights: np.ndarray  # (A, J) rows sum to 1
    part_labels: tuple[str, ...]  # (A,) from PART_VOCABULARY
    shape_basis: np.ndarray | None = None  # (A, 3, B) meters per unit beta
    joint_names: tuple[str, ...] | None = None
    vertex_weights: np.ndarray | None = None  # (V, J) base-mesh skinning table
    vertex_shape_basis: np.ndarray | None = None  # (V, 3, B)
    anchor_vertex_map: np.ndarray | None = None  # (A,) nearest base-mesh vertex

    def __post_init__(self):
        joints = _as_float(self.joints, (3,), "joints")
        parents = np.asarray(self.parents, dtype=int).reshape(-1)
        anchors = _as_float(self.anchors, (3,), "anchors")
        weights = np.asarray(self.skin_weights, dtype=float)
        labels = tuple(self.part_labels)
        j, a = len(joints), len(anchors)
        if len(parents) != j:
            raise DimensionError("BodyModel: parents length must equal joint count")
        if parents[0] != -1 or np.any(parents[1:] >= np.arange(1, j)) or np.any(parents[1:] < 0):
            raise InvariantError("BodyModel: joints must be topologically sorted (parent < child, root = -1)")
        if weights.shape != (a, j):
            raise DimensionError(f"BodyModel: skin_weights must be (A, J) = ({a}, {j}), got {weights.shape}")
        if np.any(weights < 0) or np.any(np.abs(weights.sum(axis=1) - 1.0) > _WEIGHT_SUM_TOL):
            raise InvariantError("BodyModel: each skin_weights row must be non-negative and sum to 1 (within 1e-6)")
        if len(labels) != a:
            raise DimensionError("BodyModel: part_labels length must equal anchor count")
        bad = sorted({l for l in labels if l not in PART_VOCABULARY})
        if bad:
            raise ValidationError(f"BodyModel: unknown part labels {bad}; vocabulary is {list(PART_VOCABULARY)}")
        basis = self.shape_basis
        if basis is not None:
            basis = np.asarray(basis, dtype=float)
            if basis.ndim != 3 or basis.shape[:2] != (a, 3):
                raise DimensionError("BodyModel: shape_basis must be (A, 3, B)")
            object.__setattr__(self, "shape_basis", _freeze(basis))
        vw = self.vertex_weights
        if vw is not None:
            vw = np.asarray(vw, dtype=float)
            if vw.ndim != 2 or vw.shape[1] != j:
                raise DimensionError("BodyModel: vertex_weights must be (V, J)")
            if np.any(vw < 0) or np.any(np.abs(vw.sum(axis=1) - 1.0) > _WEIGHT_SUM_TOL):
                raise InvariantError("BodyModel: vertex_weights rows must be non-negative and sum to 1")
            object.__setattr__(self, "vertex_weights", _freeze(vw))
        vb = self.vertex_shape_basis
        if vb is not None:
            vb = np.asarray(vb, dtype=float)
            if vw is None or vb.shape[:2] != (len(vw), 3):
                raise DimensionError("BodyModel: vertex_shape_basis must be (V, 3, B) matching vertex_weights")
            object.__setattr__(self, "vertex_shape_basis", _freeze(vb))
        avm = self.anchor_vertex_map
        if avm is not None:
            avm = np.asarray(avm, dtype=int).reshape(-1)
            if len(avm) != a:
                raise DimensionError("BodyModel: anchor_vertex_map length must equal anchor count")
            object.__setattr__(self, "anchor_vertex_map", _freeze(avm))
        object.__setattr__(self, "joints", _freeze(joints))
        object.__setattr__(self, "parents", _freeze(parents))
        object.__setattr__(self, "anchors", _freeze(anchors))
        object.__setattr__(self, "skin_weights", _freeze(weights))
        object.__setattr__(self, "part_labels", labels)
        if self.joint_names is not None:
            object.__setattr__(self, "joint_names", tuple(self.joint_names))

    @property
    def joint_count(self) -> int:
        return len(self.joints)

    @property
    def anchor_count(self) -> int:
        return len(self.anchors)

    @property
    def shape_dim(self) -> int:
        return 0 if self.shape_basis is None else self.shape_basis.shape[2]


@dataclass(frozen=True)
class HumanState:
    """Pose, shape coefficients, and canonical splat attributes of the human.

    `attr.positions` are offsets from the body anchors, not absolute points.
    """

    pose: np.ndarray  # (J, 3) axis-angle per joint
    shape: np.ndarray  # (B,) beta coefficients
    attr: GaussianSet

    def __post_init__(self):
        pose = _as_float(self.pose, (3,), "pose")
        shape = np.asarray(self.shape, dtype=float).reshape(-1)
        object.__setattr__(self, "pose", _freeze(pose))
        object.__setattr__(self, "shape", _freeze(shape))

    def check_against(self, body: BodyModel) -> None:
        if len(self.pose) != body.joint_count:
            raise DimensionError("HumanState: pose length must equal joint count")
        if len(self.attr) != body.anchor_count:
            raise DimensionError("HumanState: attr length must equal anchor count")
        if len(self.shape) != body.shape_dim:
            raise DimensionError(
                f"HumanState: shape has {len(self.shape)} coefficients, body expects {body.shape_dim}"
            )


@dataclass(frozen=True)
class ObjectState:
    """Similarity transform (R, t, s) over canonical object splats."""

    rotation: np.ndarray  # (4,) unit quaternion
    translation: np.ndarray  # (3,)
    scale: float
    attr: GaussianSet

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=float).reshape(-1)
        if rot.shape != (4,):
            raise DimensionError("ObjectState: rotation must be a quaternion (4,)")
        if abs(np.linalg.norm(rot) - 1.0) > _QUAT_NORM_TOL:
            raise InvariantError("ObjectState: rotation must be unit-norm within 1e-6")
        tr = np.asarray(self.translation, dtype=float).reshape(-1)
        if tr.shape != (3,):
            raise DimensionError("ObjectState: translation must be a 3-vector")
        s = float(self.scale)
        if not (s > 0.0):
            raise InvariantError("ObjectState: scale must be strictly positive")
        object.__setattr__(self, "rotation", _freeze(rot))
        object.__setattr__(self, "translation", _freeze(tr))
        object.__setattr__(self, "scale", s)


@dataclass(frozen=True)
class Scene:
    """Everything the optimization stage consumes."""

    body: BodyModel
    human: HumanState
    object: ObjectState
    background: np.ndarray  # (H, W, 3) in [0, 1]
    front_camera: "Camera"  # noqa: F821 - camera.Camera, kept untyped to avoid a cycle
    holistic_prompt: str
    contact_prompt: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        self.human.check_against(self.body)
        bg = np.asarray(self.background, dtype=float)
        if bg.ndim != 3 or bg.shape[2] != 3:
            raise DimensionError("Scene: background must be (H, W, 3)")
        cam = self.front_camera
        if bg.shape[0] != cam.height or bg.shape[1] != cam.width:
            raise DimensionError(
                f"Scene: background {bg.shape[:2]} does not match front camera "
                f"({cam.height}, {cam.width})"
            )
        bad = sorted({p for p in self.contact_prompt if p not in PART_VOCABULARY})
        if bad:
            raise ValidationError(f"Scene: contact_prompt has unknown parts {bad}")
        object.__setattr__(self, "background", _freeze(bg))
        object.__setattr__(self, "contact_prompt", tuple(self.contact_prompt))

    def with_states(self, human: HumanState, obj: ObjectState) -> "Scene":
        return replace(self, human=human, object=obj)


# ---------------------------------------------------------------------------
# Forward kinematics


@dataclass
class FkCache:
    pose: np.ndarray
    q_local: np.ndarray  # (J, 4)
    q_world: np.ndarray  # (J, 4)
    rot: np.ndarray  # (J, 3, 3)
    trans: np.ndarray  # (J, 3)


def _fk_compute(body: BodyModel, pose: np.ndarray) -> FkCache:
    joints, parents = body.joints, body.parents
    j = body.joint_count
    q_local = axis_angle_to_quat(pose)
    q_world = np.empty((j, 4))
    rot = np.empty((j, 3, 3))
    trans = np.empty((j, 3))
    for k in range(j):
        p = parents[k]
        q_world[k] = q_local[k] if p < 0 else quat_multiply(q_world[p], q_local[k])
        rot[k] = quat_to_mat(q_world[k])
        r = joints[k]
        if p < 0:
            trans[k] = r - rot[k] @ r
        else:
            trans[k] = trans[p] + rot[p] @ r - rot[k] @ r
    return FkCache(pose=np.array(pose, dtype=float), q_local=q_local, q_world=q_world, rot=rot, trans=trans)


def _fk_vjp(
    body: BodyModel, cache: FkCache, d_q_world: np.ndarray, d_rot: np.ndarray, d_trans: np.ndarray
) -> np.ndarray:
    """Backpropagate joint-transform cotangents to the axis-angle pose."""
    parents, joints = body.parents, body.joints
    j = body.joint_count
    dq_w = d_q_world.copy()
    dA = d_rot.copy()
    db = d_trans.copy()
    d_pose = np.zeros((j, 3))
    for k in reversed(range(j)):
        p = parents[k]
        r = joints[k]
        if p >= 0:
            db[p] += db[k]
            dA[p] += np.outer(db[k], r)
        dA[k] -= np.outer(db[k], r)
        dq_w[k] += quat_to_mat_vjp(cache.q_world[k], dA[k])
        if p >= 0:
            dqp, dql = quat_multiply_vjp(cache.q_world[p], cache.q_local[k], dq_w[k])
            dq_w[p] += dqp
        else:
            dql = dq_w[k]
        d_pose[k] = axis_angle_to_quat_vjp(cache.pose[k], dql)
    return d_pose


def forward_kinematics(body: BodyModel, pose: np.ndarray) -> np.ndarray:
    """World rigid transform per joint as homogeneous (J, 4, 4) matrices.

    Joint j's transform is its parent's composed with a rotation about the
    rest position of joint j; the zero pose maps every rest joint to itself.
    """
    pose = np.asarray(pose, dtype=float)
    if pose.shape != (body.joint_count, 3):
        raise DimensionError(f"forward_kinematics: pose must be ({body.joint_count}, 3), got {pose.shape}")
    cache = _fk_compute(body, pose)
    out = np.tile(np.eye(4), (body.joint_count, 1, 1))
    out[:, :3, :3] = cache.rot
    out[:, :3, 3] = cache.trans
    return out


# ---------------------------------------------------------------------------
# Human posing (LBS)


@dataclass
class PoseHumanCache:
    body: BodyModel
    fk: FkCache
    p_rest: np.ndarray  # (A, 3) anchors + shape displacement + offsets
    blend_rot: np.ndarray  # (A, 3, 3) weight-blended rotations
    signs: np.ndarray  # (A, J) quaternion sign alignment
    q_sum: np.ndarray  # (A, 4) pre-normalization quaternion average
    q_blend: np.ndarray  # (A, 4)
    attr_rotations: np.ndarray


def pose_human_fwd(body: BodyModel, state: HumanState) -> tuple[GaussianSet, PoseHumanCache]:
    state.check_against(body)
    fk = _fk_compute(body, state.pose)
    w = body.skin_weights
    p_rest = body.anchors + state.attr.positions
    if body.shape_basis is not None and len(state.shape):
        p_rest = p_rest + body.shape_basis @ state.shape
    blend_rot = np.einsum("aj,jkl->akl", w, fk.rot)
    trans = w @ fk.trans
    positions = np.einsum("akl,al->ak", blend_rot, p_rest) + trans

    # Quaternion blend, sign-aligned to each anchor's max-weight joint.
    ref = np.argmax(w, axis=1)
    dots = fk.q_world @ fk.q_world.T  # (J, J)
    signs = np.where(dots[ref, :] < 0.0, -1.0, 1.0)  # (A, J)
    q_sum = (w * signs) @ fk.q_world
    q_blend = quat_normalize(q_sum)
    rotations = quat_multiply(q_blend, state.attr.rotations)
    rotations = quat_normalize(rotations)

    posed = GaussianSet(
        positions=positions,
        rotations=rotations,
        scales=state.attr.scales,
        opacities=state.attr.opacities,
        colors=state.attr.colors,
    )
    cache = PoseHumanCache(
        body=body,
        fk=fk,
        p_rest=p_rest,
        blend_rot=blend_rot,
        signs=signs,
        q_sum=q_sum,
        q_blend=q_blend,
        attr_rotations=np.asarray(state.attr.rotations),
    )
    return posed, cache


def pose_human_vjp(
    cache: PoseHumanCache,
    d_positions: np.ndarray,
    d_rotations: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Cotangents of pose_human_fwd output -> {pose, shape, attr_positions}.

    Scales/opacities/colors are pass-through copies, so their cotangents need
    no chain and are handled by the caller directly.
    """
    body, fk = cache.body, cache.fk
    w = body.skin_weights
    a, j = w.shape
    d_q_world = np.zeros((j, 4))
    d_rot_j = np.zeros((j, 3, 3))
    d_trans_j = np.zeros((j, 3))

    d_p_rest = np.einsum("alk,al->ak", cache.blend_rot, d_positions)
    d_blend = np.einsum("ak,al->akl", d_positions, cache.p_rest)
    d_rot_j += np.einsum("aj,akl->jkl", w, d_blend)
    d_trans_j += w.T @ d_positions

    if d_rotations is not None:
        # posed rotation = normalize(q_blend * attr_rot); attr rotations are
        # fixed, so only the blend side is chained.
        prod = quat_multiply(cache.q_blend, cache.attr_rotations)
        d_prod = quat_normalize_vjp(prod, d_rotations)
        d_qblend, _ = quat_multiply_vjp(cache.q_blend, cache.attr_rotations, d_prod)
        d_qsum = quat_normalize_vjp(cache.q_sum, d_qblend)
        d_q_world += np.einsum("aj,ac->jc", w * cache.signs, d_qsum)

    d_pose = _fk_vjp(body, fk, d_q_world, d_rot_j, d_trans_j)
    out = {"pose": d_pose, "attr_positions": d_p_rest}
    if body.shape_basis is not None:
        out["shape"] = np.einsum("akb,ak->b", body.shape_basis, d_p_rest)
    else:
        out["shape"] = np.zeros(0)
    return out


def pose_human(body: BodyModel, state: HumanState) -> GaussianSet:
    """Animate the canonical human splats with LBS driven by (pose, shape)."""
    posed, _ = pose_human_fwd(body, state)
    return posed


def pose_mesh_vertices(
    body: BodyModel, base_vertices: np.ndarray, pose: np.ndarray, shape: np.ndarray
) -> np.ndarray:
    """LBS over explicit base-mesh vertices using the body's vertex table."""
    if body.vertex_weights is None:
        raise ValidationError("body file has no vertex skinning table (vertex_weights)")
    base_vertices = np.asarray(base_vertices, dtype=float)
    if base_vertices.shape != body.vertex_weights.shape[:1] + (3,):
        raise DimensionError(
            f"pose_mesh_vertices: base mesh has {len(base_vertices)} vertices, "
            f"vertex table expects {body.vertex_weights.shape[0]}"
        )
    fk = _fk_compute(body, np.asarray(pose, dtype=float))
    verts = base_vertices
    shape = np.asarray(shape, dtype=float).reshape(-1)
    if body.vertex_shape_basis is not None and len(shape):
        verts = verts + body.vertex_shape_basis @ shape
    blend = np.einsum("vj,jkl->vkl", body.vertex_weights, fk.rot)
    return np.einsum("vkl,vl->vk", blend, verts) + body.vertex_weights @ fk.trans


# ---------------------------------------------------------------------------
# Object transform


@dataclass
class ObjectTransformCache:
    state: ObjectState
    rot_mat: np.ndarray  # (3, 3)
    rotated: np.ndarray  # (N, 3) R @ p before scale/translation


def apply_object_transform_fwd(state: ObjectState) -> tuple[GaussianSet, ObjectTransformCache]:
    rot_mat = quat_to_mat(state.rotation)
    rotated = state.attr.positions @ rot_mat.T
    positions = state.scale * rotated + state.translation
    rotations = quat_normalize(quat_multiply(state.rotation, state.attr.rotations))
    posed = GaussianSet(
        positions=positions,
        rotations=rotations,
        scales=state.scale * state.attr.scales,
        opacities=state.attr.opacities,
        colors=state.attr.colors,
    )
    return posed, ObjectTransformCache(state=state, rot_mat=rot_mat, rotated=rotated)


def apply_object_transform_vjp(
    cache: ObjectTransformCache,
    d_positions: np.ndarray,
    d_rotations: np.ndarray | None = None,
    d_scales: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Cotangents -> {rotation, translation, scale, attr_positions, attr_scales}."""
    st = cache.state
    s = st.scale
    d_q = np.zeros(4)
    d_t = d_positions.sum(axis=0)
    d_s = float(np.einsum("nk,nk->", d_positions, cache.rotated))
    d_rotmat = s * np.einsum("nk,nl->kl", d_positions, st.attr.positions)
    d_p = s * (d_positions @ cache.rot_mat)
    d_q += quat_to_mat_vjp(st.rotation, d_rotmat)
    d_attr_scales = np.zeros_like(st.attr.scales)
    if d_scales is not None:
        d_s += float(np.sum(d_scales * st.attr.scales))
        d_attr_scales = s * d_scales
    if d_rotations is not None:
        prod = quat_multiply(st.rotation, st.attr.rotations)
        d_prod = quat_normalize_vjp(prod, d_rotations)
        d_q_b, _ = quat_multiply_vjp(
            np.broadcast_to(st.rotation, prod.shape), st.attr.rotations, d_prod
        )
        d_q += d_q_b.sum(axis=0)
    return {
        "rotation": d_q,
        "translation": d_t,
        "scale": d_s,
        "attr_positions": d_p,
        "attr_scales": d_attr_scales,
    }


def apply_object_transform(state: ObjectState) -> GaussianSet:
    """Similarity transform of canonical object splats: p -> s R p + t."""
    posed, _ = apply_object_transform_fwd(state)
    return posed


def transform_points(state: ObjectState, points: np.ndarray) -> np.ndarray:
    """Apply the object similarity transform to arbitrary points."""
    rot_mat = quat_to_mat(state.rotation)
    return state.scale * (np.asarray(points, dtype=float) @ rot_mat.T) + state.translation


def transform_points_vjp(
    state: ObjectState, points: np.ndarray, d_out: np.ndarray
) -> dict[str, np.ndarray]:
    rot_mat = quat_to_mat(state.rotation)
    rotated = np.asarray(points, dtype=float) @ rot_mat.T
    d_rotmat = state.scale * np.einsum("nk,nl->kl", d_out, points)
    return {
        "rotation": quat_to_mat_vjp(state.rotation, d_rotmat),
        "translation": d_out.sum(axis=0),
        "scale": float(np.einsum("nk,nk->", d_out, rotated)),
        "points": state.scale * (d_out @ rot_mat),
    }


# ---------------------------------------------------------------------------
# Contact anchor selection


def select_contact_anchors(body: BodyModel, prompt) -> np.ndarray:
    """Indices of anchors whose part label appears in the contact prompt."""
    parts = list(prompt)
    bad = sorted({p for p in parts if p not in PART_VOCABULARY})
    if bad:
        raise ValidationError(
            f"select_contact_anchors: unknown part names {bad}; vocabulary is {list(PART_VOCABULARY)}"
        )
    if not parts:
        return np.zeros(0, dtype=int)
    wanted = set(parts)
    labels = np.array(body.part_labels)
    return np.flatnonzero(np.isin(labels, sorted(wanted)))
