"""The joint human-object refinement loop.

Parameters are split into three Adam groups with separate exponentially
decaying learning rates: object pose (rotation increment, translation, log
scale), human pose (joint angles, shape coefficients), and splat attributes
(canonical offsets, log scales, opacities, colors of both entities). Each
step renders the front view against the input targets, renders one random
novel view for the guidance gradient, adds contact and collision terms,
backpropagates everything through the renderer and scene transforms, clips
the global gradient norm, and applies per-group Adam updates.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .camera import SphericalSampler, sample_viewpoint
from .errors import GuidanceUnavailableError, NumericalError, ValidationError
from .geometry import (
    axis_angle_to_quat,
    axis_angle_to_quat_vjp,
    quat_multiply,
    quat_multiply_vjp,
    quat_normalize,
    quat_normalize_vjp,
)
from .guidance import GuidanceProvider
from .losses import (
    LossWeights,
    appearance_grad,
    collision_loss,
    contact_loss,
    recon_loss,
    total_loss,
)
from .meshes import TriMesh
from .render import render_backward, render_with_grad
from .scene import (
    GaussianSet,
    HumanState,
    ObjectState,
    Scene,
    apply_object_transform_fwd,
    apply_object_transform_vjp,
    pose_human_fwd,
    pose_human_vjp,
    select_contact_anchors,
    transform_points,
    transform_points_vjp,
)

log = logging.getLogger(__name__)

_MIN_OPACITY = 1e-4


@dataclass(frozen=True)
class OptimConfig:
    steps: int = 200
    lr_object_pose: float = 1e-2
    lr_human_pose: float = 1e-4
    lr_gaussian_attrs: float = 1e-4
    decay: float | None = None  # per-step factor; None -> 0.1 ** (1/steps)
    clip_norm: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    upper_body_view_prob: float = 0.5
    seed: int = 0
    contact_tau: float = 0.10
    guidance_cfg_scale: float = 15.0
    guidance_t_range: tuple[float, float] = (0.02, 0.98)
    guidance_retries: int = 3
    spine_joint_index: int = 1
    full_body_radius: tuple[float, float] = (1.0, 2.5)
    upper_body_radius: tuple[float, float] = (0.7, 1.5)
    elevation_range_deg: tuple[float, float] = (-30.0, 30.0)
    azimuth_range_deg: tuple[float, float] = (-180.0, 180.0)

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError("OptimConfig: steps must be >= 1")
        for name in ("lr_object_pose", "lr_human_pose", "lr_gaussian_attrs", "clip_norm"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"OptimConfig: {name} must be positive")

    @property
    def gamma(self) -> float:
        return self.decay if self.decay is not None else 0.1 ** (1.0 / self.steps)


GROUPS = {
    "object_pose": ("omega", "translation", "log_scale"),
    "human_pose": ("theta", "beta"),
    "gaussian_attrs": (
        "h_offsets", "h_log_scales", "h_opacity", "h_color",
        "o_positions", "o_log_scales", "o_opacity", "o_color",
    ),
}
_GROUP_OF = {name: g for g, names in GROUPS.items() for name in names}


def lr_at(config: OptimConfig, group: str, step: int) -> float:
    """Exponentially decayed learning rate for `group` at `step`."""
    base = {
        "object_pose": config.lr_object_pose,
        "human_pose": config.lr_human_pose,
        "gaussian_attrs": config.lr_gaussian_attrs,
    }[group]
    return base * config.gamma**step


@dataclass
class ParamGroups:
    """Every optimizable quantity, each appearing in exactly one group.

    The object rotation lives as the axis-angle increment `omega`, re-absorbed
    into `rotation_current` after every step; scales are optimized in log
    space to preserve positivity.
    """

    theta: np.ndarray  # (J, 3)
    beta: np.ndarray  # (B,)
    omega: np.ndarray  # (3,)
    translation: np.ndarray  # (3,)
    log_scale: np.ndarray  # ()
    h_offsets: np.ndarray  # (A, 3)
    h_log_scales: np.ndarray  # (A, 3)
    h_opacity: np.ndarray  # (A,)
    h_color: np.ndarray  # (A, 3)
    o_positions: np.ndarray  # (N, 3)
    o_log_scales: np.ndarray  # (N, 3)
    o_opacity: np.ndarray  # (N,)
    o_color: np.ndarray  # (N, 3)
    rotation_current: np.ndarray  # (4,) unit quaternion, not directly optimized

    @classmethod
    def from_scene(cls, scene: Scene) -> "ParamGroups":
        h = scene.human
        o = scene.object
        return cls(
            theta=np.array(h.pose),
            beta=np.array(h.shape),
            omega=np.zeros(3),
            translation=np.array(o.translation),
            log_scale=np.array(np.log(o.scale)),
            h_offsets=np.array(h.attr.positions),
            h_log_scales=np.log(h.attr.scales),
            h_opacity=np.array(h.attr.opacities),
            h_color=np.array(h.attr.colors),
            o_positions=np.array(o.attr.positions),
            o_log_scales=np.log(o.attr.scales),
            o_opacity=np.array(o.attr.opacities),
            o_color=np.array(o.attr.colors),
            rotation_current=np.array(o.rotation),
        )

    def param_names(self) -> list[str]:
        return [n for names in GROUPS.values() for n in names]

    def copy(self) -> "ParamGroups":
        kw = {f.name: np.array(getattr(self, f.name)) for f in fields(self)}
        return ParamGroups(**kw)

    def effective_rotation(self) -> np.ndarray:
        return quat_normalize(quat_multiply(axis_angle_to_quat(self.omega), self.rotation_current))

    def build_states(self, scene: Scene) -> tuple[HumanState, ObjectState]:
        human = HumanState(
            pose=self.theta,
            shape=self.beta,
            attr=GaussianSet(
                positions=self.h_offsets,
                rotations=scene.human.attr.rotations,
                scales=np.exp(self.h_log_scales),
                opacities=np.clip(self.h_opacity, 0.0, 1.0),
                colors=np.clip(self.h_color, 0.0, 1.0),
            ),
        )
        obj = ObjectState(
            rotation=self.effective_rotation(),
            translation=self.translation,
            scale=float(np.exp(self.log_scale)),
            attr=GaussianSet(
                positions=self.o_positions,
                rotations=scene.object.attr.rotations,
                scales=np.exp(self.o_log_scales),
                opacities=np.clip(self.o_opacity, 0.0, 1.0),
                colors=np.clip(self.o_color, 0.0, 1.0),
            ),
        )
        return human, obj

    def project_valid(self) -> None:
        """Clamp box-constrained parameters after a step."""
        np.clip(self.h_opacity, _MIN_OPACITY, 1.0, out=self.h_opacity)
        np.clip(self.o_opacity, _MIN_OPACITY, 1.0, out=self.o_opacity)
        np.clip(self.h_color, 0.0, 1.0, out=self.h_color)
        np.clip(self.o_color, 0.0, 1.0, out=self.o_color)

    def absorb_rotation(self) -> None:
        self.rotation_current = quat_normalize(
            quat_multiply(axis_angle_to_quat(self.omega), self.rotation_current)
        )
        self.omega = np.zeros(3)


def zero_grads(params: ParamGroups) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(getattr(params, name)) for name in params.param_names()}


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float = 1.0) -> tuple[dict, float]:
    """Scale all gradients so their joint L2 norm is at most `max_norm`."""
    if max_norm <= 0:
        raise ValidationError("clip_global_norm: max_norm must be positive")
    total = float(np.sqrt(sum(float(np.sum(g**2)) for g in grads.values())))
    if total > max_norm:
        factor = max_norm / total
        grads = {k: g * factor for k, g in grads.items()}
    return grads, total


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: ParamGroups) -> "AdamState":
        return cls(
            m={n: np.zeros_like(getattr(params, n)) for n in params.param_names()},
            v={n: np.zeros_like(getattr(params, n)) for n in params.param_names()},
        )


def adam_step(
    state: AdamState,
    params: ParamGroups,
    grads: dict[str, np.ndarray],
    lrs: dict[str, float],
    config: OptimConfig,
) -> None:
    """Standard Adam with bias correction; learning rate chosen per group."""
    state.t += 1
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name in params.param_names():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"adam_step: non-finite gradient in group {_GROUP_OF[name]!r} ({name})")
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g**2
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        update = lrs[_GROUP_OF[name]] * m_hat / (np.sqrt(v_hat) + eps)
        setattr(params, name, getattr(params, name) - update)


@dataclass
class OptimTargets:
    input_image: np.ndarray  # (H, W, 3)
    human_mask: np.ndarray  # (H, W) in [0, 1]
    object_mask: np.ndarray  # (H, W)


@dataclass
class TraceRow:
    step: int
    total: float
    recon: float
    contact: float
    collision: float
    appr_grad_norm: float
    lr_object_pose: float
    lr_human_pose: float
    lr_gaussian_attrs: float
    view_mode: str
    view_r: float
    view_elev_deg: float
    view_azim_deg: float
    grad_norm: float
    wall_time_s: float


@dataclass
class OptTrace:
    rows: list[TraceRow] = field(default_factory=list)
    events: list[str] = field(default_factory=list)

    def to_csv(self, path) -> None:
        names = [f.name for f in fields(TraceRow)]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(names)
            for row in self.rows:
                writer.writerow([getattr(row, n) for n in names])


@dataclass
class _StepResult:
    breakdown_parts: dict
    grads: dict[str, np.ndarray]
    human_posed: GaussianSet
    object_posed: GaussianSet
    hcache: object = None
    ocache: object = None


def deterministic_losses(
    scene: Scene,
    params: ParamGroups,
    targets: OptimTargets,
    weights: LossWeights,
    config: OptimConfig,
    object_mesh: TriMesh,
    need_grad: bool = True,
) -> _StepResult:
    """Recon + contact + collision for the current parameters.

    The appearance term is handled separately by the step loop because it is
    stochastic (random view, random noise level) and gradient-only.
    """
    human_state, object_state = params.build_states(scene)
    human_posed, hcache = pose_human_fwd(scene.body, human_state)
    object_posed, ocache = apply_object_transform_fwd(object_state)
    entities = [(human_posed, "human"), (object_posed, "object")]

    if need_grad:
        out, ctx = render_with_grad(entities, scene.front_camera, scene.background)
    else:
        from .render import render as _render

        out = _render(entities, scene.front_camera, scene.background)
        ctx = None
    rr = recon_loss(out, targets.input_image, targets.human_mask, targets.object_mask)

    contact_idx = select_contact_anchors(scene.body, scene.contact_prompt)
    cl = contact_loss(
        human_posed.positions[contact_idx], object_posed.positions, tau=config.contact_tau
    )

    posed_mesh = TriMesh(
        transform_points(object_state, object_mesh.vertices), object_mesh.faces, object_mesh.colors
    )
    col = collision_loss(human_posed.positions, posed_mesh)

    parts = {
        "recon_rgb": rr.rgb_term,
        "recon_sil": rr.sil_term,
        "contact": cl.value,
        "collision": col.value,
    }
    if not need_grad:
        return _StepResult(parts, {}, human_posed, object_posed, hcache, ocache)

    gg = render_backward(
        ctx,
        weights.w_recon_rgb * rr.d_rgb,
        {
            "human": weights.w_recon_sil * rr.d_alpha_human,
            "object": weights.w_recon_sil * rr.d_alpha_object,
        },
    )
    d_human = gg["human"]
    d_object = gg["object"]
    d_human.positions[contact_idx] += weights.w_contact * cl.d_contact_points
    d_object.positions += weights.w_contact * cl.d_object_points
    d_human.positions += weights.w_collision * col.d_points
    d_mesh_verts = weights.w_collision * col.d_vertices

    grads = _chain_to_params(scene, params, hcache, ocache, d_human, d_object, d_mesh_verts, object_mesh)
    return _StepResult(parts, grads, human_posed, object_posed, hcache, ocache)


def _chain_to_params(
    scene, params, hcache, ocache, d_human, d_object, d_mesh_verts, object_mesh
) -> dict[str, np.ndarray]:
    grads = zero_grads(params)

    hvjp = pose_human_vjp(hcache, d_human.positions, d_human.rotations)
    grads["theta"] += hvjp["pose"]
    if len(params.beta):
        grads["beta"] += hvjp["shape"]
    grads["h_offsets"] += hvjp["attr_positions"]
    h_scales = np.exp(params.h_log_scales)
    grads["h_log_scales"] += d_human.scales * h_scales
    grads["h_opacity"] += d_human.opacities
    grads["h_color"] += d_human.colors

    ovjp = apply_object_transform_vjp(ocache, d_object.positions, d_object.rotations, d_object.scales)
    d_q = ovjp["rotation"]
    d_t = ovjp["translation"]
    d_s = ovjp["scale"]
    if np.any(d_mesh_verts):
        mvjp = transform_points_vjp(ocache.state, object_mesh.vertices, d_mesh_verts)
        d_q = d_q + mvjp["rotation"]
        d_t = d_t + mvjp["translation"]
        d_s = d_s + mvjp["scale"]

    grads["o_positions"] += ovjp["attr_positions"]
    o_scales = np.exp(params.o_log_scales)
    grads["o_log_scales"] += ovjp["attr_scales"] * o_scales
    grads["o_opacity"] += d_object.opacities
    grads["o_color"] += d_object.colors
    grads["translation"] += d_t
    grads["log_scale"] += d_s * np.exp(params.log_scale)

    # omega chain: q_eff = normalize(quat(omega) * rotation_current)
    q_inc = axis_angle_to_quat(params.omega)
    prod = quat_multiply(q_inc, params.rotation_current)
    d_prod = quat_normalize_vjp(prod, d_q)
    d_qinc, _ = quat_multiply_vjp(q_inc, params.rotation_current, d_prod)
    grads["omega"] += axis_angle_to_quat_vjp(params.omega, d_qinc)
    return grads


def _novel_view(scene, params, config, rng):
    """Draw the per-step novel viewpoint (full-body or upper-body zoom)."""
    mode = "upper-body" if rng.uniform() < config.upper_body_view_prob else "full-body"
    if mode == "upper-body":
        origin = _joint_world_position(scene, params, config.spine_joint_index)
        sampler = SphericalSampler(
            origin, config.upper_body_radius, config.elevation_range_deg,
            config.azimuth_range_deg, "upper-body",
        )
    else:
        origin = _joint_world_position(scene, params, 0)
        sampler = SphericalSampler(
            origin, config.full_body_radius, config.elevation_range_deg,
            config.azimuth_range_deg, "full-body",
        )
    cam = scene.front_camera
    novel, coords = sample_viewpoint(sampler, rng, width=cam.width, height=cam.height, focal=cam.fx)
    return novel, mode, coords


def _joint_world_position(scene, params, joint_index):
    from .scene import forward_kinematics

    fk = forward_kinematics(scene.body, params.theta)
    j = min(max(joint_index, 0), scene.body.joint_count - 1)
    return fk[j, :3, :3] @ scene.body.joints[j] + fk[j, :3, 3]


def run_hoi_optimization(
    scene: Scene,
    targets: OptimTargets,
    guidance: GuidanceProvider,
    config: OptimConfig,
    *,
    object_mesh: TriMesh,
    weights: LossWeights | None = None,
    snapshot_every: int = 0,
    snapshot_fn=None,
) -> tuple[Scene, OptTrace]:
    """Jointly refine the human and object over `config.steps` steps.

    Per step: front-view reconstruction against the targets, one novel-view
    guidance gradient (skipped with a logged event when the provider keeps
    failing), contact over the prompted anchors vs object splat centers,
    collision against the posed object mesh; then global-norm clipping and
    per-group Adam updates. Returns the refined scene and the full trace.
    """
    weights = weights or LossWeights()
    targets = OptimTargets(
        np.asarray(targets.input_image, float),
        np.asarray(targets.human_mask, float),
        np.asarray(targets.object_mask, float),
    )
    cam = scene.front_camera
    if targets.input_image.shape != (cam.height, cam.width, 3):
        raise ValidationError("run_hoi_optimization: targets do not match the front camera size")

    params = ParamGroups.from_scene(scene)
    adam = AdamState.for_params(params)
    rng = np.random.default_rng(config.seed)
    trace = OptTrace()

    for step in range(config.steps):
        t0 = time.perf_counter()
        result = deterministic_losses(scene, params, targets, weights, config, object_mesh)
        grads = result.grads

        novel_cam, mode, coords = _novel_view(scene, params, config, rng)
        appr_norm = 0.0
        entities = [(result.human_posed, "human"), (result.object_posed, "object")]
        out_n, ctx_n = render_with_grad(entities, novel_cam, scene.background)
        try:
            g_img = appearance_grad(
                guidance,
                out_n,
                scene.holistic_prompt,
                rng,
                cfg_scale=config.guidance_cfg_scale,
                t_range=config.guidance_t_range,
                retries=config.guidance_retries,
            )
            g_img = weights.w_appr * g_img
            appr_norm = float(np.linalg.norm(g_img))
            gg_n = render_backward(ctx_n, g_img)
            extra = _chain_to_params(
                scene, params, result.hcache, result.ocache, gg_n["human"], gg_n["object"],
                np.zeros_like(np.asarray(object_mesh.vertices)), object_mesh,
            )
            for k in grads:
                grads[k] += extra[k]
        except GuidanceUnavailableError as e:
            trace.events.append(f"step {step}: guidance skipped ({e})")
            log.warning("step %d: guidance skipped: %s", step, e)

        try:
            breakdown = total_loss(
                result.breakdown_parts["recon_rgb"],
                result.breakdown_parts["recon_sil"],
                result.breakdown_parts["contact"],
                result.breakdown_parts["collision"],
                appr_norm,
                weights,
            )
        except NumericalError as e:
            e.trace = trace
            raise

        grads, grad_norm = clip_global_norm(grads, config.clip_norm)
        lrs = {g: lr_at(config, g, step) for g in GROUPS}
        adam_step(adam, params, grads, lrs, config)
        params.absorb_rotation()
        params.project_valid()

        trace.rows.append(
            TraceRow(
                step=step,
                total=breakdown.total,
                recon=breakdown.recon,
                contact=breakdown.contact,
                collision=breakdown.collision,
                appr_grad_norm=breakdown.appr,
                lr_object_pose=lrs["object_pose"],
                lr_human_pose=lrs["human_pose"],
                lr_gaussian_attrs=lrs["gaussian_attrs"],
                view_mode=mode,
                view_r=coords[0],
                view_elev_deg=coords[1],
                view_azim_deg=coords[2],
                grad_norm=grad_norm,
                wall_time_s=time.perf_counter() - t0,
            )
        )
        if snapshot_every and snapshot_fn and (step + 1) % snapshot_every == 0:
            human_state, object_state = params.build_states(scene)
            snapshot_fn(step, scene.with_states(human_state, object_state))

    human_state, object_state = params.build_states(scene)
    return scene.with_states(human_state, object_state), trace
