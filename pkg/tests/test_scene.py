import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hoisplat.errors import DimensionError, InvariantError, ValidationError
from hoisplat.geometry import axis_angle_to_quat, quat_multiply, quat_to_mat
from hoisplat.scene import (
    PART_VOCABULARY,
    BodyModel,
    GaussianSet,
    HumanState,
    ObjectState,
    apply_object_transform,
    apply_object_transform_fwd,
    apply_object_transform_vjp,
    forward_kinematics,
    pose_human,
    pose_human_fwd,
    pose_human_vjp,
    select_contact_anchors,
    validate_gaussian_set,
)
from oracles import finite_difference, fk_recursive


def make_gaussians(n, rng=None, positions=None):
    rng = rng or np.random.default_rng(0)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianSet(
        positions=positions if positions is not None else rng.normal(size=(n, 3)),
        rotations=q,
        scales=rng.uniform(0.05, 0.3, size=(n, 3)),
        opacities=rng.uniform(0.1, 0.9, size=n),
        colors=rng.uniform(0, 1, size=(n, 3)),
    )


def two_joint_body(n_anchors=2, weights=None, labels=None, shape_basis=None):
    return BodyModel(
        joints=np.array([[0.0, 0, 0], [1.0, 0, 0]]),
        parents=np.array([-1, 0]),
        anchors=np.array([[2.0, 0, 0], [0.5, 0.2, 0]])[:n_anchors],
        skin_weights=np.array([[0.5, 0.5], [1.0, 0.0]])[:n_anchors] if weights is None else weights,
        part_labels=("right hand", "torso")[:n_anchors] if labels is None else labels,
        shape_basis=shape_basis,
    )


class TestGaussianSetInvariants:
    def test_rejects_non_unit_quaternion(self):
        with pytest.raises(InvariantError):
            GaussianSet(np.zeros((1, 3)), [[0.9, 0, 0, 0]], np.ones((1, 3)), [0.5], np.zeros((1, 3)))

    def test_rejects_negative_scale(self):
        with pytest.raises(InvariantError):
            GaussianSet(np.zeros((1, 3)), [[1, 0, 0, 0]], [[0.1, -0.1, 0.1]], [0.5], np.zeros((1, 3)))

    def test_rejects_out_of_range_opacity(self):
        with pytest.raises(InvariantError):
            GaussianSet(np.zeros((1, 3)), [[1, 0, 0, 0]], np.ones((1, 3)), [1.5], np.zeros((1, 3)))

    def test_rejects_length_mismatch(self):
        with pytest.raises(DimensionError):
            GaussianSet(np.zeros((2, 3)), [[1, 0, 0, 0]], np.ones((2, 3)), [0.5, 0.5], np.zeros((2, 3)))

    def test_immutable(self):
        gs = make_gaussians(3)
        with pytest.raises(ValueError):
            gs.positions[0, 0] = 1.0


class TestForwardKinematics:
    def test_zero_pose_is_identity(self):
        body = two_joint_body()
        out = forward_kinematics(body, np.zeros((2, 3)))
        np.testing.assert_allclose(out, np.tile(np.eye(4), (2, 1, 1)), atol=1e-12)

    def test_two_joint_rotation_about_root(self):
        # chain along +x, root rotated 90 deg about z: child joint (1,0,0) -> (0,1,0)
        body = two_joint_body()
        pose = np.array([[0.0, 0.0, np.pi / 2], [0.0, 0.0, 0.0]])
        out = forward_kinematics(body, pose)
        child = out[1] @ np.array([1.0, 0, 0, 1.0])
        np.testing.assert_allclose(child[:3], [0.0, 1.0, 0.0], atol=1e-12)

    def test_local_rotation_fixes_own_rest_joint(self):
        rng = np.random.default_rng(5)
        body = _chain_body(5)
        pose = 0.4 * rng.normal(size=(5, 3))
        out = forward_kinematics(body, pose)
        for j in range(5):
            # the local rotation acts about rest joint j, so T_j(rest_j) = T_parent(rest_j)
            mapped = out[j, :3, :3] @ body.joints[j] + out[j, :3, 3]
            p = body.parents[j]
            parent_t = out[p] if p >= 0 else np.eye(4)
            expected = parent_t[:3, :3] @ body.joints[j] + parent_t[:3, 3]
            np.testing.assert_allclose(mapped, expected, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_recursive_oracle(self, seed):
        rng = np.random.default_rng(seed)
        body = _chain_body(6, branching=True)
        pose = rng.normal(size=(6, 3))
        got = forward_kinematics(body, pose)
        expected = fk_recursive(body.joints, body.parents, pose)
        np.testing.assert_allclose(got, expected, atol=1e-10)

    def test_pose_length_mismatch(self):
        with pytest.raises(DimensionError):
            forward_kinematics(two_joint_body(), np.zeros((3, 3)))


def _chain_body(j, branching=False):
    rng = np.random.default_rng(42 + j)
    joints = np.cumsum(rng.uniform(-0.3, 0.3, size=(j, 3)), axis=0)
    parents = np.array([-1] + [rng.integers(0, k) if branching else k - 1 for k in range(1, j)])
    a = 3 * j
    w = rng.uniform(0, 1, size=(a, j))
    w /= w.sum(axis=1, keepdims=True)
    return BodyModel(
        joints=joints,
        parents=parents,
        anchors=rng.normal(size=(a, 3)),
        skin_weights=w,
        part_labels=tuple(PART_VOCABULARY[i % len(PART_VOCABULARY)] for i in range(a)),
        shape_basis=0.1 * rng.normal(size=(a, 3, 2)),
    )


class TestPoseHuman:
    def test_identity_pose_returns_anchors(self):
        body = _chain_body(4)
        state = HumanState(
            pose=np.zeros((4, 3)),
            shape=np.zeros(2),
            attr=make_gaussians(body.anchor_count, positions=np.zeros((body.anchor_count, 3))),
        )
        posed = pose_human(body, state)
        assert np.max(np.abs(posed.positions - body.anchors)) < 1e-9

    def test_rigid_weight_follows_joint(self):
        body = two_joint_body()
        pose = np.array([[0.0, 0, 0], [0.3, -0.2, 0.5]])
        anchor_idx = 1  # weight 1.0 on joint 0 -> joint 0 transform applies
        state = HumanState(pose=pose, shape=np.zeros(0), attr=make_gaussians(2, positions=np.zeros((2, 3))))
        posed = pose_human(body, state)
        fk = forward_kinematics(body, pose)
        expected = fk[0, :3, :3] @ body.anchors[anchor_idx] + fk[0, :3, 3]
        np.testing.assert_allclose(posed.positions[anchor_idx], expected, atol=1e-12)

    def test_fifty_fifty_blend_hand_computed(self):
        # joints at origin and (1,0,0); child rotated 90 deg about z; anchor at
        # (2,0,0) with 50/50 weights: T0 p = (2,0,0), T1 p = (1,1,0) -> (1.5, .5, 0)
        body = two_joint_body()
        pose = np.array([[0.0, 0, 0], [0, 0, np.pi / 2]])
        state = HumanState(pose=pose, shape=np.zeros(0), attr=make_gaussians(2, positions=np.zeros((2, 3))))
        posed = pose_human(body, state)
        np.testing.assert_allclose(posed.positions[0], [1.5, 0.5, 0.0], atol=1e-12)

    def test_shape_basis_displaces_anchors(self):
        body = _chain_body(4)
        beta = np.array([0.5, -0.3])
        attr = make_gaussians(body.anchor_count, positions=np.zeros((body.anchor_count, 3)))
        posed = pose_human(body, HumanState(pose=np.zeros((4, 3)), shape=beta, attr=attr))
        np.testing.assert_allclose(posed.positions, body.anchors + body.shape_basis @ beta, atol=1e-12)

    def test_attrs_copied_through(self):
        body = _chain_body(3)
        attr = make_gaussians(body.anchor_count)
        posed = pose_human(body, HumanState(np.zeros((3, 3)), np.zeros(2), attr))
        np.testing.assert_array_equal(posed.scales, attr.scales)
        np.testing.assert_array_equal(posed.opacities, attr.opacities)
        np.testing.assert_array_equal(posed.colors, attr.colors)
        validate_gaussian_set(posed)

    def test_output_satisfies_invariants_random_pose(self):
        body = _chain_body(6)
        rng = np.random.default_rng(3)
        attr = make_gaussians(body.anchor_count, rng)
        posed = pose_human(body, HumanState(rng.normal(size=(6, 3)), rng.normal(size=2), attr))
        validate_gaussian_set(posed)


class TestPoseHumanVjp:
    @pytest.mark.parametrize("seed", range(3))
    def test_position_gradients_match_fd(self, seed):
        rng = np.random.default_rng(seed)
        body = _chain_body(4, branching=True)
        attr = make_gaussians(body.anchor_count, rng)
        pose0 = 0.5 * rng.normal(size=(4, 3))
        beta0 = rng.normal(size=2)
        cot_pos = rng.normal(size=(body.anchor_count, 3))
        cot_rot = rng.normal(size=(body.anchor_count, 4))

        def run(pose, shape, offsets):
            st = HumanState(pose=pose, shape=shape, attr=GaussianSet(
                offsets, attr.rotations, attr.scales, attr.opacities, attr.colors))
            posed, cache = pose_human_fwd(body, st)
            return posed, cache

        def value(pose, shape, offsets):
            posed, _ = run(pose, shape, offsets)
            return float(np.sum(posed.positions * cot_pos) + np.sum(posed.rotations * cot_rot))

        _, cache = run(pose0, beta0, attr.positions)
        grads = pose_human_vjp(cache, cot_pos, cot_rot)

        fd_pose = finite_difference(lambda p: value(p, beta0, attr.positions), pose0)
        np.testing.assert_allclose(grads["pose"], fd_pose, rtol=1e-5, atol=1e-7)
        fd_shape = finite_difference(lambda b: value(pose0, b, attr.positions), beta0)
        np.testing.assert_allclose(grads["shape"], fd_shape, rtol=1e-5, atol=1e-7)
        fd_off = finite_difference(lambda o: value(pose0, beta0, o), np.asarray(attr.positions))
        np.testing.assert_allclose(grads["attr_positions"], fd_off, rtol=1e-5, atol=1e-7)


class TestObjectTransform:
    def test_identity(self):
        attr = make_gaussians(5)
        state = ObjectState(np.array([1.0, 0, 0, 0]), np.zeros(3), 1.0, attr)
        out = apply_object_transform(state)
        np.testing.assert_allclose(out.positions, attr.positions, atol=1e-12)
        np.testing.assert_allclose(out.scales, attr.scales, atol=1e-12)

    def test_scale_translate(self):
        attr = make_gaussians(1, positions=np.array([[0.0, 0, 1.0]]))
        state = ObjectState(np.array([1.0, 0, 0, 0]), np.array([1.0, 0, 0]), 2.0, attr)
        out = apply_object_transform(state)
        np.testing.assert_allclose(out.positions[0], [1.0, 0.0, 2.0], atol=1e-12)
        np.testing.assert_allclose(out.scales, 2.0 * attr.scales, atol=1e-12)

    def test_rotation_90z(self):
        attr = make_gaussians(1, positions=np.array([[1.0, 0, 0]]))
        q = axis_angle_to_quat(np.array([0.0, 0.0, np.pi / 2]))
        state = ObjectState(q, np.zeros(3), 1.0, attr)
        out = apply_object_transform(state)
        np.testing.assert_allclose(out.positions[0], [0.0, 1.0, 0.0], atol=1e-12)

    def test_rejects_nonpositive_scale(self):
        with pytest.raises(InvariantError):
            ObjectState(np.array([1.0, 0, 0, 0]), np.zeros(3), 0.0, make_gaussians(1))

    @given(st.integers(0, 10_000))
    def test_composition_property(self, seed):
        rng = np.random.default_rng(seed)
        attr = make_gaussians(4, rng)
        q1 = axis_angle_to_quat(rng.normal(size=3))
        q2 = axis_angle_to_quat(rng.normal(size=3))
        t1, t2 = rng.normal(size=3), rng.normal(size=3)
        s1, s2 = rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)
        step1 = apply_object_transform(ObjectState(q1, t1, s1, attr))
        step2 = apply_object_transform(ObjectState(q2, t2, s2, step1))
        # analytic composition: R = R2 R1, s = s2 s1, t = s2 R2 t1 + t2
        qc = quat_multiply(q2, q1)
        tc = s2 * quat_to_mat(q2) @ t1 + t2
        composed = apply_object_transform(ObjectState(qc, tc, s2 * s1, attr))
        assert np.max(np.abs(step2.positions - composed.positions)) < 1e-9
        np.testing.assert_allclose(step2.scales, composed.scales, atol=1e-9)

    def test_vjp_matches_fd(self):
        rng = np.random.default_rng(9)
        attr = make_gaussians(5, rng)
        q0 = axis_angle_to_quat(rng.normal(size=3))
        t0, s0 = rng.normal(size=3), 1.3
        cot_pos = rng.normal(size=(5, 3))
        cot_rot = rng.normal(size=(5, 4))
        cot_scale = rng.normal(size=(5, 3))

        def value(q, t, s, p):
            st_ = ObjectState(q / np.linalg.norm(q), t, float(s), GaussianSet(
                p, attr.rotations, attr.scales, attr.opacities, attr.colors))
            out, _ = apply_object_transform_fwd(st_)
            return float(
                np.sum(out.positions * cot_pos)
                + np.sum(out.rotations * cot_rot)
                + np.sum(out.scales * cot_scale)
            )

        _, cache = apply_object_transform_fwd(ObjectState(q0, t0, s0, attr))
        g = apply_object_transform_vjp(cache, cot_pos, cot_rot, cot_scale)
        np.testing.assert_allclose(
            g["translation"], finite_difference(lambda t: value(q0, t, s0, attr.positions), t0),
            rtol=1e-6, atol=1e-8,
        )
        np.testing.assert_allclose(
            g["scale"],
            finite_difference(lambda s: value(q0, t0, s[0], attr.positions), np.array([s0]))[0],
            rtol=1e-6, atol=1e-8,
        )
        np.testing.assert_allclose(
            g["attr_positions"],
            finite_difference(lambda p: value(q0, t0, s0, p), np.asarray(attr.positions)),
            rtol=1e-6, atol=1e-8,
        )
        # quaternion cotangent: compare along the unit-sphere tangent space,
        # since the forward normalizes q before use
        fd_q = finite_difference(lambda q: value(q, t0, s0, attr.positions), np.asarray(q0))
        proj = np.eye(4) - np.outer(q0, q0)
        np.testing.assert_allclose(proj @ g["rotation"], proj @ fd_q, rtol=1e-5, atol=1e-8)


class TestSelectContactAnchors:
    def test_label_scan(self):
        body = _chain_body(4)
        idx = select_contact_anchors(body, ["right hand"])
        labels = np.array(body.part_labels)
        np.testing.assert_array_equal(idx, np.flatnonzero(labels == "right hand"))

    def test_empty_prompt_empty_set(self):
        assert len(select_contact_anchors(_chain_body(3), [])) == 0

    def test_union_no_duplicates(self):
        body = _chain_body(5)
        idx = select_contact_anchors(body, ["left hand", "right hand"])
        labels = np.array(body.part_labels)
        expected = np.flatnonzero(np.isin(labels, ["left hand", "right hand"]))
        np.testing.assert_array_equal(np.sort(idx), expected)
        assert len(np.unique(idx)) == len(idx)

    def test_permutation_invariant(self):
        body = _chain_body(5)
        a = select_contact_anchors(body, ["left hand", "right hand", "head"])
        b = select_contact_anchors(body, ["head", "right hand", "left hand"])
        np.testing.assert_array_equal(np.sort(a), np.sort(b))

    def test_unknown_part_lists_vocabulary(self):
        with pytest.raises(ValidationError) as exc:
            select_contact_anchors(_chain_body(3), ["tail"])
        assert "head" in str(exc.value)


class TestBodyModelValidation:
    def test_rejects_unsorted_parents(self):
        with pytest.raises(InvariantError):
            BodyModel(
                joints=np.zeros((2, 3)),
                parents=np.array([-1, 1]),
                anchors=np.zeros((1, 3)),
                skin_weights=np.array([[1.0, 0.0]]),
                part_labels=("head",),
            )

    def test_rejects_unnormalized_weights(self):
        with pytest.raises(InvariantError):
            two_joint_body(weights=np.array([[0.5, 0.4], [1.0, 0.0]]))

    def test_rejects_unknown_label(self):
        with pytest.raises(ValidationError):
            two_joint_body(labels=("right hand", "tentacle"))
