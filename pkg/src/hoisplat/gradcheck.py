"""Finite-difference verification of the analytic gradient chain.

Builds small random scenes (<= 20 splats) and compares the analytic gradients
of the reconstruction + contact + collision objective, with respect to every
scalar in every parameter group, against central finite differences.

Scenes are resampled until they sit safely away from the objective's known
non-smooth sets: depth-sort ties, the contact threshold and nearest-neighbor
switches, the object surface (collision indicator and closest-face ties), and
the compositing early-exit threshold. The comparison itself then probes the
identical deterministic forward path the optimizer uses.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .camera import Camera
from .losses import LossWeights
from .meshes import TriMesh, closest_points_on_mesh, points_inside
from .optimizer import GROUPS, OptimConfig, OptimTargets, ParamGroups, deterministic_losses
from .render import render
from .scene import BodyModel, GaussianSet, HumanState, ObjectState, Scene, pose_human
from .shapes import cube_mesh

_MARGIN = 2e-3


def _mini_body(rng: np.random.Generator) -> BodyModel:
    joints = np.array(
        [
            [0.0, 0.0, 0.0],
            [0.0, 0.25, 0.0],
            [0.18, 0.32, 0.0],
            [0.34, 0.32, 0.0],
        ]
    ) + 0.02 * rng.normal(size=(4, 3))
    parents = np.array([-1, 0, 1, 2])
    n_anchors = 8
    seg = rng.integers(0, 4, size=n_anchors)
    anchors = joints[seg] + rng.uniform(-0.08, 0.08, size=(n_anchors, 3))
    w = np.zeros((n_anchors, 4))
    for i, s in enumerate(seg):
        w[i, s] = 0.7
        w[i, (s + rng.integers(1, 4)) % 4] = 0.3
    labels = ["torso", "torso", "torso", "right hand"]
    part_labels = tuple(labels[s] for s in seg)
    return BodyModel(
        joints=joints,
        parents=parents,
        anchors=anchors,
        skin_weights=w,
        part_labels=part_labels,
        shape_basis=0.05 * rng.normal(size=(n_anchors, 3, 1)),
    )


def _face_distance_margins(points: np.ndarray, mesh: TriMesh) -> float:
    """Smallest gap between each point's two nearest face distances."""
    best = np.inf
    for p in points:
        dists = []
        for f in mesh.faces:
            sub = TriMesh(mesh.vertices, f[None, :])
            dists.append(closest_points_on_mesh(p[None, :], sub)[3][0])
        d = np.sort(dists)
        best = min(best, d[1] - d[0])
    return float(best)


def build_check_scene(seed: int):
    """One margin-checked random scene: (scene, targets, object mesh, config)."""
    rng = np.random.default_rng(seed)
    config = OptimConfig(steps=1, seed=seed)
    for attempt in range(60):
        body = _mini_body(rng)
        n = body.anchor_count
        q = rng.normal(size=(n, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        attr = GaussianSet(
            positions=0.01 * rng.normal(size=(n, 3)),
            rotations=q,
            scales=rng.uniform(0.03, 0.09, size=(n, 3)),
            opacities=rng.uniform(0.15, 0.7, size=n),
            colors=rng.uniform(0.1, 0.9, size=(n, 3)),
        )
        human = HumanState(pose=0.25 * rng.normal(size=(4, 3)), shape=rng.normal(size=1), attr=attr)

        mesh = cube_mesh(size=float(rng.uniform(0.12, 0.2)), subdivisions=0)
        hand = body.anchors[np.array(body.part_labels) == "right hand"]
        center = hand[0] if len(hand) else body.anchors[rng.integers(0, n)]
        offset = center + rng.uniform(-0.06, 0.06, size=3)
        oq = rng.normal(size=4)
        oq /= np.linalg.norm(oq)
        obj_attr_q = rng.normal(size=(len(mesh.vertices), 4))
        obj_attr_q /= np.linalg.norm(obj_attr_q, axis=1, keepdims=True)
        obj_attr = GaussianSet(
            positions=np.asarray(mesh.vertices),
            rotations=obj_attr_q,
            scales=rng.uniform(0.03, 0.08, size=(len(mesh.vertices), 3)),
            opacities=rng.uniform(0.15, 0.7, size=len(mesh.vertices)),
            colors=rng.uniform(0.1, 0.9, size=(len(mesh.vertices), 3)),
        )
        obj = ObjectState(oq, offset, float(rng.uniform(0.8, 1.2)), obj_attr)

        cam = Camera.looking_at(
            (rng.uniform(-0.3, 0.3), rng.uniform(-0.2, 0.4), 2.0), (0, 0.2, 0),
            width=24, height=24, focal=26.0,
        )
        background = rng.uniform(0, 1, size=(24, 24, 3))
        scene = Scene(
            body=body,
            human=human,
            object=obj,
            background=background,
            front_camera=cam,
            holistic_prompt="gradcheck",
            contact_prompt=("right hand",) if "right hand" in body.part_labels else (),
        )
        targets = OptimTargets(
            input_image=rng.uniform(0, 1, size=(24, 24, 3)),
            human_mask=rng.uniform(0, 1, size=(24, 24)),
            object_mask=rng.uniform(0, 1, size=(24, 24)),
        )
        if _margins_ok(scene, config, mesh):
            return scene, targets, mesh, config
    raise RuntimeError(f"could not build a margin-safe gradcheck scene for seed {seed}")


def _margins_ok(scene: Scene, config: OptimConfig, object_mesh: TriMesh) -> bool:
    from scipy.spatial import cKDTree

    from .scene import apply_object_transform, select_contact_anchors, transform_points

    human_posed = pose_human(scene.body, scene.human)
    object_posed = apply_object_transform(scene.object)

    # depth-sort tie margin from the front camera
    all_pos = np.concatenate([human_posed.positions, object_posed.positions])
    depths = np.sort(scene.front_camera.world_to_camera(all_pos)[:, 2])
    if np.min(np.diff(depths)) < 1e-3 or depths[0] < 0.2:
        return False

    # compositing must not graze the early-exit threshold
    out = render(
        [(human_posed, "human"), (object_posed, "object")],
        scene.front_camera,
        scene.background,
    )
    if np.max(sum(out.alphas.values())) > 1.0 - 1e-3:
        return False

    # contact threshold / nearest-neighbor switch margins
    idx = select_contact_anchors(scene.body, scene.contact_prompt)
    if len(idx):
        k = min(2, len(object_posed.positions))
        d, _ = cKDTree(object_posed.positions).query(human_posed.positions[idx], k=k)
        d = np.atleast_2d(d)
        if np.any(np.abs(d[:, 0] - config.contact_tau) < _MARGIN):
            return False
        if k == 2 and np.any((d[:, 1] - d[:, 0]) < _MARGIN):
            return False

    # collision margins: every human point clear of the posed surface, and
    # points inside clear of closest-face ties
    posed_mesh = TriMesh(
        transform_points(scene.object, object_mesh.vertices), object_mesh.faces
    )
    dist = closest_points_on_mesh(human_posed.positions, posed_mesh)[3]
    if np.any(dist < _MARGIN):
        return False
    inside = points_inside(human_posed.positions, posed_mesh)
    if np.any(inside):
        if _face_distance_margins(human_posed.positions[inside], posed_mesh) < _MARGIN:
            return False
    return True


@dataclass
class GradcheckReport:
    n_scenes: int
    n_params: int
    max_rel_err: float
    worst: str
    per_group_max: dict
    elapsed_s: float
    passed: bool
    failures: list = field(default_factory=list)

    def summary(self) -> str:
        lines = [
            f"gradcheck: {self.n_scenes} scenes, {self.n_params} parameters, "
            f"max rel err {self.max_rel_err:.3e} ({self.worst}), {self.elapsed_s:.1f}s"
        ]
        for g, v in self.per_group_max.items():
            lines.append(f"  group {g:16s} max rel err {v:.3e}")
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


def run_gradcheck(
    n_scenes: int = 20,
    seed: int = 0,
    h: float = 1e-4,
    rel_tol: float = 1e-3,
    stride: int = 1,
) -> GradcheckReport:
    """Compare analytic vs central-difference gradients over random scenes.

    `stride` probes every stride-th scalar per array (1 = every scalar).
    """
    weights = LossWeights()
    t0 = time.time()
    max_err = 0.0
    worst = ""
    per_group = {g: 0.0 for g in GROUPS}
    n_params = 0
    failures = []
    for s in range(n_scenes):
        scene, targets, mesh, config = build_check_scene(seed + 1000 * s)
        params = ParamGroups.from_scene(scene)
        result = deterministic_losses(scene, params, targets, weights, config, mesh, need_grad=True)
        grads = result.grads

        def value(p: ParamGroups) -> float:
            r = deterministic_losses(scene, p, targets, weights, config, mesh, need_grad=False)
            b = r.breakdown_parts
            return (
                weights.w_recon_rgb * b["recon_rgb"]
                + weights.w_recon_sil * b["recon_sil"]
                + weights.w_contact * b["contact"]
                + weights.w_collision * b["collision"]
            )

        for group, names in GROUPS.items():
            for name in names:
                base = np.array(getattr(params, name), dtype=float)
                flat = base.ravel()
                for i in range(0, flat.size, stride):
                    n_params += 1
                    fd_vals = []
                    for sgn in (+1, -1):
                        probe = params.copy()
                        mod = flat.copy()
                        mod[i] += sgn * h
                        setattr(probe, name, mod.reshape(base.shape))
                        fd_vals.append(value(probe))
                    fd = (fd_vals[0] - fd_vals[1]) / (2.0 * h)
                    analytic = float(np.asarray(grads[name]).ravel()[i])
                    denom = max(abs(fd), abs(analytic), 1e-7)
                    err = abs(fd - analytic) / denom
                    if err > per_group[group]:
                        per_group[group] = err
                    if err > max_err:
                        max_err = err
                        worst = f"scene {s} {name}[{i}] fd={fd:.6e} analytic={analytic:.6e}"
                    if err > rel_tol:
                        failures.append(f"scene {s} {name}[{i}]: rel err {err:.3e}")
    return GradcheckReport(
        n_scenes=n_scenes,
        n_params=n_params,
        max_rel_err=max_err,
        worst=worst,
        per_group_max=per_group,
        elapsed_s=time.time() - t0,
        passed=max_err < rel_tol,
        failures=failures,
    )
