"""Synthetic closed-loop test scenes.

Builds a toy-humanoid scene holding / standing near / reaching toward a
parametric object, renders the ground truth to produce optimization targets,
and returns a perturbed copy whose recovery the acceptance suite measures.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bodyfile import toy_body
from .camera import Camera
from .errors import ValidationError
from .geometry import axis_angle_to_quat, quat_multiply, quat_normalize
from .meshes import TriMesh, mesh_to_gaussians, surface_distances
from .optimizer import OptimTargets
from .render import render
from .scene import GaussianSet, HumanState, ObjectState, Scene, pose_mesh_vertices
from .shapes import make_object_mesh

INTERACTIONS = ("hold", "stand-near", "reach")

_PART_PALETTE = {
    "head": (0.85, 0.66, 0.55),
    "neck": (0.85, 0.66, 0.55),
    "torso": (0.25, 0.35, 0.65),
    "hips": (0.25, 0.28, 0.32),
    "hand": (0.85, 0.66, 0.55),
    "upper arm": (0.30, 0.42, 0.68),
    "forearm": (0.82, 0.62, 0.52),
    "thigh": (0.25, 0.28, 0.32),
    "shin": (0.25, 0.28, 0.32),
    "foot": (0.15, 0.15, 0.16),
}


@dataclass(frozen=True)
class SynthSpec:
    object_kind: str = "cube"  # cube | sphere | frisbee-disc
    interaction: str = "hold"  # hold | stand-near | reach
    translation_perturbation: float = 0.15  # meters
    rotation_perturbation_deg: float = 15.0
    pose_perturbation: float = 0.0  # radians of per-joint noise
    image_size: int = 96

    def __post_init__(self):
        if self.interaction not in INTERACTIONS:
            raise ValidationError(f"SynthSpec: interaction must be one of {INTERACTIONS}")


@dataclass
class SynthResult:
    gt_scene: Scene
    perturbed_scene: Scene
    targets: OptimTargets
    gt_contact: np.ndarray  # bool per base-mesh vertex (5 cm rule)
    human_base_mesh: TriMesh
    object_mesh: TriMesh  # canonical object mesh
    spec: SynthSpec
    seed: int


def _part_color(label: str) -> np.ndarray:
    for key, c in _PART_PALETTE.items():
        if key in label:
            return np.array(c)
    return np.array([0.5, 0.5, 0.5])


def _object_placement(kind: str, interaction: str, posed_hand_center: np.ndarray) -> np.ndarray:
    half_extent = {"cube": 0.09, "sphere": 0.11, "frisbee-disc": 0.02}[kind]
    if interaction == "hold":
        # gripping: the lowest hand splats sit slightly inside the object so
        # the contact pull and the collision push balance near the truth
        return posed_hand_center + np.array([0.0, -(0.035 + half_extent - 0.008), 0.0])
    if interaction == "reach":
        # 12 cm beyond the hand tip: outside both the 5 cm map and tau
        return posed_hand_center + np.array([-(0.06 + half_extent + 0.12), 0.0, 0.0])
    # stand-near: half a meter clear of the body, front-right
    return np.array([0.35, 0.10, 0.48])


def synth_scene(seed: int, spec: SynthSpec | None = None) -> SynthResult:
    spec = spec or SynthSpec()
    rng = np.random.default_rng(seed)
    body, base_mesh = toy_body()
    n = body.anchor_count

    gt_pose = np.zeros((body.joint_count, 3))
    gt_pose[6] = [0.0, 0.0, 0.25]  # slight elbow bends so FK is non-trivial
    gt_pose[7] = [0.0, 0.0, -0.25]
    gt_pose[2] = [0.06, 0.0, 0.0]
    gt_pose += 0.02 * rng.normal(size=gt_pose.shape)

    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    colors = np.stack([_part_color(l) for l in body.part_labels])
    colors = np.clip(colors + 0.04 * rng.normal(size=colors.shape), 0.02, 0.98)
    attr = GaussianSet(
        positions=np.zeros((n, 3)),
        rotations=rot,
        scales=np.full((n, 3), 0.032),
        opacities=np.full(n, 0.88),
        colors=colors,
    )
    human = HumanState(pose=gt_pose, shape=np.zeros(body.shape_dim), attr=attr)

    from .scene import pose_human

    posed = pose_human(body, human)
    hand_idx = np.array(body.part_labels) == "right hand"
    posed_hand_center = posed.positions[hand_idx].mean(axis=0)

    size_kw = {"cube": {"size": 0.18, "subdivisions": 2},
               "sphere": {"radius": 0.11, "subdivisions": 2},
               "frisbee-disc": {}}[spec.object_kind]
    object_mesh = make_object_mesh(spec.object_kind, **size_kw)
    obj_attr = mesh_to_gaussians(object_mesh, default_opacity=0.92)
    gt_rotation = quat_normalize(axis_angle_to_quat(0.05 * rng.normal(size=3)))
    gt_translation = _object_placement(spec.object_kind, spec.interaction, posed_hand_center)
    gt_object = ObjectState(gt_rotation, gt_translation, 1.0, obj_attr)

    size = spec.image_size
    camera = Camera.looking_at((0.0, -0.05, 2.45), (0.0, -0.05, 0.0), width=size, height=size, focal=1.05 * size)
    yy = np.linspace(0, 1, size)[:, None, None]
    background = np.concatenate(
        [0.72 - 0.25 * yy, 0.78 - 0.18 * yy, 0.88 - 0.08 * yy], axis=2
    ) * np.ones((1, size, 1))

    contact_prompt = ("right hand",) if spec.interaction == "hold" else ()
    gt_scene = Scene(
        body=body,
        human=human,
        object=gt_object,
        background=background,
        front_camera=camera,
        holistic_prompt=f"a person {spec.interaction.replace('-', ' ')}ing a {spec.object_kind}",
        contact_prompt=contact_prompt,
    )

    out = render(
        [(_posed_human(gt_scene), "human"), (_posed_object(gt_scene), "object")],
        camera,
        background,
    )
    targets = OptimTargets(
        input_image=out.rgb, human_mask=out.alpha_human, object_mask=out.alpha_object
    )

    gt_human_mesh_verts = pose_mesh_vertices(body, base_mesh.vertices, gt_pose, human.shape)
    from .scene import transform_points

    gt_obj_mesh = TriMesh(transform_points(gt_object, object_mesh.vertices), object_mesh.faces)
    gt_contact = surface_distances(gt_human_mesh_verts, gt_obj_mesh) < 0.05

    # perturbation: in-plane-biased random direction at the requested magnitude
    direction = rng.normal(size=3) * np.array([1.0, 1.0, 0.6])
    direction /= np.linalg.norm(direction)
    p_translation = gt_translation + spec.translation_perturbation * direction
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    p_rotation = quat_normalize(
        quat_multiply(axis_angle_to_quat(np.deg2rad(spec.rotation_perturbation_deg) * axis), gt_rotation)
    )
    p_pose = gt_pose + spec.pose_perturbation * rng.normal(size=gt_pose.shape)
    perturbed = gt_scene.with_states(
        HumanState(pose=p_pose, shape=human.shape, attr=attr),
        ObjectState(p_rotation, p_translation, 1.0, obj_attr),
    )
    return SynthResult(
        gt_scene=gt_scene,
        perturbed_scene=perturbed,
        targets=targets,
        gt_contact=gt_contact,
        human_base_mesh=base_mesh,
        object_mesh=object_mesh,
        spec=spec,
        seed=seed,
    )


def _posed_human(scene: Scene) -> GaussianSet:
    from .scene import pose_human

    return pose_human(scene.body, scene.human)


def _posed_object(scene: Scene) -> GaussianSet:
    from .scene import apply_object_transform

    return apply_object_transform(scene.object)
