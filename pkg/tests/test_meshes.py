import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import ConvexHull

from hoisplat.bodyfile import toy_body
from hoisplat.errors import InvariantError, ValidationError
from hoisplat.meshes import (
    TriMesh,
    closest_points_on_mesh,
    contact_shift,
    detect_contact_pairs,
    extract_posed_meshes,
    is_watertight,
    load_mesh_ply,
    load_obj,
    map_pairs_to_vertices,
    match_pairs_one_to_one,
    mesh_to_gaussians,
    points_inside,
    save_mesh_ply,
    save_obj,
    winding_numbers,
)
from hoisplat.scene import (
    GaussianSet,
    HumanState,
    ObjectState,
    Scene,
    forward_kinematics,
)
from hoisplat.shapes import cube_mesh, disc_mesh, sphere_mesh
from hoisplat.camera import Camera
from oracles import brute_nearest, ray_cast_inside


def unit_cube():
    return cube_mesh(size=1.0, subdivisions=0)


def gaussians_at(points):
    n = len(points)
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return GaussianSet(points, rot, 0.05 * np.ones((n, 3)), 0.5 * np.ones(n), 0.5 * np.ones((n, 3)))


class TestTriMesh:
    def test_rejects_degenerate_face(self):
        with pytest.raises(InvariantError):
            TriMesh(np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]]), np.array([[0, 1, 2]]))

    def test_rejects_out_of_range_index(self):
        with pytest.raises(ValidationError):
            TriMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 3]]))


class TestContainment:
    @pytest.mark.parametrize("mesh_fn", [unit_cube, lambda: sphere_mesh(0.5, 1), disc_mesh])
    def test_winding_matches_raycast_oracle(self, mesh_fn):
        mesh = mesh_fn()
        rng = np.random.default_rng(0)
        lo = mesh.vertices.min(axis=0) - 0.2
        hi = mesh.vertices.max(axis=0) + 0.2
        pts = rng.uniform(lo, hi, size=(200, 3))
        got = winding_numbers(pts, mesh) > 0.5
        expected = ray_cast_inside(pts, mesh.vertices, mesh.faces)
        np.testing.assert_array_equal(got, expected)

    def test_winding_on_random_convex_hulls(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            cloud = rng.normal(size=(30, 3))
            hull = ConvexHull(cloud)
            # reorient hull faces outward (ConvexHull orientation is arbitrary)
            faces = []
            centroid = cloud[hull.vertices].mean(axis=0)
            for simplex, eq in zip(hull.simplices, hull.equations):
                a, b, c = cloud[simplex]
                n = np.cross(b - a, c - a)
                faces.append(simplex if n @ eq[:3] > 0 else simplex[[0, 2, 1]])
            mesh = TriMesh(cloud, np.array(faces))
            pts = rng.uniform(-2, 2, size=(100, 3))
            got = winding_numbers(pts, mesh) > 0.5
            expected = ray_cast_inside(pts, cloud, mesh.faces)
            np.testing.assert_array_equal(got, expected)

    def test_non_watertight_falls_back_with_warning(self):
        open_mesh = TriMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]]))
        assert not is_watertight(open_mesh)
        with pytest.warns(UserWarning, match="watertight"):
            inside = points_inside(np.array([[0.2, 0.2, 0.5]]), open_mesh)
        assert not inside[0]

    def test_closest_point_distances(self):
        mesh = unit_cube()
        pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.6, 0.6, 0.6]])
        _, _, _, d = closest_points_on_mesh(pts, mesh)
        assert d[0] == pytest.approx(0.5)  # center to nearest face
        assert d[1] == pytest.approx(0.5)  # outside, straight to +x face
        assert d[2] == pytest.approx(np.linalg.norm([0.1, 0.1, 0.1]))  # corner region


class TestMeshToGaussians:
    def test_cube_corners_passthrough(self):
        mesh = unit_cube()
        gs = mesh_to_gaussians(mesh)
        assert len(gs) == 8
        np.testing.assert_allclose(gs.positions, mesh.vertices)
        np.testing.assert_allclose(gs.colors, mesh.colors)
        np.testing.assert_array_equal(gs.rotations, np.tile([1.0, 0, 0, 0], (8, 1)))

    def test_white_when_no_colors(self):
        mesh = TriMesh(unit_cube().vertices, unit_cube().faces, None)
        gs = mesh_to_gaussians(mesh)
        np.testing.assert_array_equal(gs.colors, np.ones((8, 3)))

    def test_regular_tetrahedron_default_scale(self):
        # edge length 1 everywhere -> default isotropic scale 0.5
        v = np.array(
            [[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float
        ) / np.sqrt(8.0)
        f = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
        gs = mesh_to_gaussians(TriMesh(v, f))
        np.testing.assert_allclose(gs.scales, 0.5, atol=1e-12)

    def test_explicit_scale_and_opacity(self):
        gs = mesh_to_gaussians(unit_cube(), default_opacity=0.7, default_scale=0.03)
        np.testing.assert_allclose(gs.scales, 0.03)
        np.testing.assert_allclose(gs.opacities, 0.7)

    def test_empty_mesh_rejected(self):
        with pytest.raises(ValidationError):
            mesh_to_gaussians(TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int)))


def make_scene(pose=None, shape=None, obj_state=None):
    body, base_mesh = toy_body()
    n = body.anchor_count
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    attr = GaussianSet(np.zeros((n, 3)), rot, 0.03 * np.ones((n, 3)), 0.8 * np.ones(n), 0.6 * np.ones((n, 3)))
    human = HumanState(
        pose=np.zeros((body.joint_count, 3)) if pose is None else pose,
        shape=np.zeros(1) if shape is None else shape,
        attr=attr,
    )
    obj_mesh = cube_mesh(0.2, 1)
    obj_attr = mesh_to_gaussians(obj_mesh, default_opacity=0.9)
    obj = obj_state or ObjectState(np.array([1.0, 0, 0, 0]), np.zeros(3), 1.0, obj_attr)
    cam = Camera.looking_at((0, 0.0, 2.4), (0, 0, 0), width=32, height=32, focal=35.0)
    scene = Scene(
        body=body,
        human=human,
        object=obj,
        background=np.zeros((32, 32, 3)),
        front_camera=cam,
        holistic_prompt="toy",
        contact_prompt=(),
    )
    return scene, base_mesh, obj_mesh


class TestExtractPosedMeshes:
    def test_identity_returns_bases(self):
        scene, base_mesh, obj_mesh = make_scene()
        hm, om = extract_posed_meshes(scene, base_mesh, obj_mesh)
        np.testing.assert_allclose(hm.vertices, base_mesh.vertices, atol=1e-12)
        np.testing.assert_allclose(om.vertices, obj_mesh.vertices, atol=1e-12)
        np.testing.assert_array_equal(hm.faces, base_mesh.faces)

    def test_object_rigid_shift(self):
        scene, base_mesh, obj_mesh = make_scene()
        shifted = ObjectState(np.array([1.0, 0, 0, 0]), np.array([0.0, 1.0, 0.0]), 1.0, scene.object.attr)
        scene2 = scene.with_states(scene.human, shifted)
        _, om = extract_posed_meshes(scene2, base_mesh, obj_mesh)
        np.testing.assert_allclose(om.vertices, obj_mesh.vertices + [0, 1.0, 0], atol=1e-12)

    def test_rigid_vertex_follows_fk(self):
        scene, base_mesh, obj_mesh = make_scene()
        body = scene.body
        pose = np.zeros((body.joint_count, 3))
        pose[6] = [0.0, 0.6, 0.0]  # left elbow bend
        scene2 = scene.with_states(
            HumanState(pose, scene.human.shape, scene.human.attr), scene.object
        )
        hm, _ = extract_posed_meshes(scene2, base_mesh, obj_mesh)
        fk = forward_kinematics(body, pose)
        rigid = np.flatnonzero(body.vertex_weights.max(axis=1) > 0.999)
        assert len(rigid) > 0
        for v_idx in rigid[:25]:
            j = int(np.argmax(body.vertex_weights[v_idx]))
            expected = fk[j, :3, :3] @ base_mesh.vertices[v_idx] + fk[j, :3, 3]
            np.testing.assert_allclose(hm.vertices[v_idx], expected, atol=1e-10)

    def test_missing_vertex_table_rejected(self):
        scene, base_mesh, obj_mesh = make_scene()
        from dataclasses import replace

        stripped = BodyModelNoTable(scene.body)
        scene2 = replace(scene, body=stripped)
        with pytest.raises(ValidationError):
            extract_posed_meshes(scene2, base_mesh, obj_mesh)


def BodyModelNoTable(body):
    from hoisplat.scene import BodyModel

    return BodyModel(
        joints=body.joints,
        parents=body.parents,
        anchors=body.anchors,
        skin_weights=body.skin_weights,
        part_labels=body.part_labels,
        shape_basis=body.shape_basis,
    )


class TestDetectContactPairs:
    def test_separated_sets_empty(self):
        a = gaussians_at(np.zeros((3, 3)))
        b = gaussians_at(np.ones((3, 3)))
        assert detect_contact_pairs(a, b, 0.05) == []

    def test_single_pair_with_distance(self):
        a = gaussians_at(np.array([[0.0, 0, 0]]))
        b = gaussians_at(np.array([[0.03, 0, 0], [1.0, 0, 0]]))
        pairs = detect_contact_pairs(a, b, 0.05)
        assert len(pairs) == 1
        h, o, d = pairs[0]
        assert (h, o) == (0, 0)
        assert d == pytest.approx(0.03)

    @given(st.integers(0, 10_000))
    @settings(max_examples=30)
    def test_matches_brute_force_union(self, seed):
        rng = np.random.default_rng(seed)
        a = gaussians_at(rng.uniform(0, 0.3, size=(rng.integers(1, 40), 3)))
        b = gaussians_at(rng.uniform(0, 0.3, size=(rng.integers(1, 40), 3)))
        thr = 0.08
        got = {(h, o) for h, o, _ in detect_contact_pairs(a, b, thr)}
        idx_ab, d_ab = brute_nearest(a.positions, b.positions)
        idx_ba, d_ba = brute_nearest(b.positions, a.positions)
        expected = {(int(h), int(idx_ab[h])) for h in range(len(a)) if d_ab[h] < thr}
        expected |= {(int(idx_ba[o]), int(o)) for o in range(len(b)) if d_ba[o] < thr}
        assert got == expected

    @given(st.integers(0, 10_000))
    @settings(max_examples=30)
    def test_symmetric_under_role_swap(self, seed):
        rng = np.random.default_rng(seed)
        a = gaussians_at(rng.uniform(0, 0.2, size=(20, 3)))
        b = gaussians_at(rng.uniform(0, 0.2, size=(15, 3)))
        fwd = {(h, o) for h, o, _ in detect_contact_pairs(a, b, 0.06)}
        rev = {(h, o) for o, h, _ in detect_contact_pairs(b, a, 0.06)}
        assert fwd == rev


class TestContactShift:
    def _mesh_pair(self, gap=0.02):
        human = cube_mesh(0.3, 1)
        obj = cube_mesh(0.2, 1)
        obj = obj.with_vertices(obj.vertices + np.array([0.25 + gap, 0.0, 0.0]))
        return human, obj

    def test_no_pairs_identity(self):
        human, obj = self._mesh_pair()
        out = contact_shift(human, obj, [])
        assert out is obj

    def test_single_pair_exact_landing(self):
        human, obj = self._mesh_pair(gap=0.02)
        h_idx = int(np.argmax(human.vertices[:, 0]))
        o_idx = int(np.argmin(obj.vertices[:, 0]))
        out = contact_shift(human, obj, [(h_idx, o_idx)])
        np.testing.assert_array_equal(out.vertices[o_idx], human.vertices[h_idx])
        np.testing.assert_array_equal(human.vertices, self._mesh_pair()[0].vertices)

    def test_multi_pair_closure_and_support(self):
        human = cube_mesh(0.3, 2)
        obj = cube_mesh(0.2, 2)
        obj = obj.with_vertices(obj.vertices + np.array([0.265, 0.0, 0.0]))
        # small patch near one corner of the facing sides
        corner = np.array([0.15, 0.15, 0.15])
        face_h = np.flatnonzero(human.vertices[:, 0] > 0.149)
        face_h = face_h[np.argsort(np.linalg.norm(human.vertices[face_h] - corner, axis=1))]
        face_o = np.flatnonzero(obj.vertices[:, 0] < obj.vertices[:, 0].min() + 1e-9)
        face_o = face_o[np.argsort(np.linalg.norm(obj.vertices[face_o] - corner, axis=1))]
        k = 3
        pairs = [(int(face_h[i]), int(face_o[i])) for i in range(k)]
        out = contact_shift(human, obj, pairs)
        for h, o in pairs:
            assert np.linalg.norm(out.vertices[o] - human.vertices[h]) < 1e-9
        # vertices beyond twice the patch radius are bit-identical
        anchors = obj.vertices[[o for _, o in pairs]]
        centroid = anchors.mean(axis=0)
        patch_radius = np.max(np.linalg.norm(anchors - centroid, axis=1))
        dmin = np.min(
            np.linalg.norm(obj.vertices[:, None, :] - anchors[None, :, :], axis=2), axis=1
        )
        far = dmin >= 2.0 * patch_radius + 1e-12
        assert far.any()
        np.testing.assert_array_equal(out.vertices[far], obj.vertices[far])

    def test_idempotent(self):
        human, obj = self._mesh_pair(gap=0.02)
        face_h = np.flatnonzero(human.vertices[:, 0] > 0.149)[:3]
        face_o = np.flatnonzero(obj.vertices[:, 0] < obj.vertices[:, 0].min() + 1e-9)[:3]
        pairs = list(zip(map(int, face_h), map(int, face_o)))
        once = contact_shift(human, obj, pairs)
        twice = contact_shift(human, once, pairs)
        np.testing.assert_array_equal(once.vertices, twice.vertices)

    def test_conflicting_targets_warn_and_average(self):
        human, obj = self._mesh_pair(gap=0.02)
        h_far = int(np.argmax(human.vertices[:, 0] + human.vertices[:, 1]))
        h_other = int(np.argmax(human.vertices[:, 0] - human.vertices[:, 1]))
        assert np.linalg.norm(human.vertices[h_far] - human.vertices[h_other]) > 0.01
        o_idx = int(np.argmin(obj.vertices[:, 0]))
        with pytest.warns(UserWarning, match="averaging"):
            out = contact_shift(human, obj, [(h_far, o_idx), (h_other, o_idx)])
        expected = 0.5 * (human.vertices[h_far] + human.vertices[h_other])
        np.testing.assert_allclose(out.vertices[o_idx], expected, atol=1e-12)


class TestPairHelpers:
    def test_match_one_to_one(self):
        pairs = [(0, 0, 0.01), (1, 0, 0.02), (1, 1, 0.03), (2, 2, 0.005)]
        matched = match_pairs_one_to_one(pairs)
        assert matched == [(0, 0, 0.01), (1, 1, 0.03), (2, 2, 0.005)]

    def test_map_pairs_carries_distance(self):
        body, _ = toy_body()
        mapped = map_pairs_to_vertices([(0, 3, 0.01)], body)
        assert mapped == [(int(body.anchor_vertex_map[0]), 3, 0.01)]


class TestMeshIO:
    def test_obj_roundtrip_with_colors(self, tmp_path):
        mesh = cube_mesh(0.2, 1)
        p = tmp_path / "m.obj"
        save_obj(mesh, p)
        back = load_obj(p)
        np.testing.assert_allclose(back.vertices, mesh.vertices, atol=1e-7)
        np.testing.assert_array_equal(back.faces, mesh.faces)
        np.testing.assert_allclose(back.colors, mesh.colors, atol=1e-7)

    def test_ply_roundtrip(self, tmp_path):
        mesh = sphere_mesh(0.15, 1)
        p = tmp_path / "m.ply"
        save_mesh_ply(mesh, p)
        back = load_mesh_ply(p)
        np.testing.assert_allclose(back.vertices, mesh.vertices, atol=1e-6)
        np.testing.assert_array_equal(back.faces, mesh.faces)
        np.testing.assert_allclose(back.colors, mesh.colors, atol=1.0 / 255)

    def test_truncated_ply_raises_format_error(self, tmp_path):
        from hoisplat.errors import FormatError

        mesh = cube_mesh(0.2, 0)
        p = tmp_path / "m.ply"
        save_mesh_ply(mesh, p)
        data = p.read_bytes()
        (tmp_path / "bad.ply").write_bytes(data[: len(data) - 20])
        with pytest.raises(FormatError):
            load_mesh_ply(tmp_path / "bad.ply")
