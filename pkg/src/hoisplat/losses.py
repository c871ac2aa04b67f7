"""The four optimization terms: reconstruction, appearance (guidance-driven,
gradient-only), contact, and collision.

Every term returns its value together with exact gradients on its immediate
inputs (images or 3D points); the optimizer chains those through the renderer
and scene transforms.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionError, GuidanceUnavailableError, NumericalError, ValidationError
from .guidance import DEFAULT_T_RANGE, GuidanceProvider, GuidanceRequest
from .meshes import TriMesh, closest_points_on_mesh, points_inside
from .render import RenderOutput

log = logging.getLogger(__name__)

CONTACT_TAU = 0.10  # meters


@dataclass(frozen=True)
class LossWeights:
    w_recon_rgb: float = 1.0
    w_recon_sil: float = 1.0
    w_appr: float = 1.0
    w_contact: float = 1.0
    w_collision: float = 1.0

    def __post_init__(self):
        for name in ("w_recon_rgb", "w_recon_sil", "w_appr", "w_contact", "w_collision"):
            if getattr(self, name) < 0:
                raise ValidationError(f"LossWeights: {name} must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    """Weighted per-term values; appearance is gradient-only and reported as
    its gradient norm (it never enters `total`)."""

    recon: float
    appr: float
    contact: float
    collision: float
    total: float


@dataclass
class ReconResult:
    value: float  # rgb_term + sil_term (unweighted)
    rgb_term: float
    sil_term: float
    d_rgb: np.ndarray  # derivative of rgb_term
    d_alpha_human: np.ndarray  # derivative of sil_term
    d_alpha_object: np.ndarray


def recon_loss(render: RenderOutput, target_rgb, target_mask_human, target_mask_object) -> ReconResult:
    """Front-view fit: MSE on rgb plus MSE on the two rendered silhouettes."""
    rgb = render.rgb
    t_rgb = np.asarray(target_rgb, dtype=float)
    m_h = np.asarray(target_mask_human, dtype=float)
    m_o = np.asarray(target_mask_object, dtype=float)
    if t_rgb.shape != rgb.shape:
        raise DimensionError(f"recon_loss: target rgb {t_rgb.shape} vs render {rgb.shape}")
    a_h, a_o = render.alpha_human, render.alpha_object
    if m_h.shape != a_h.shape or m_o.shape != a_o.shape:
        raise DimensionError("recon_loss: mask size mismatch")
    diff = rgb - t_rgb
    dh = a_h - m_h
    do = a_o - m_o
    rgb_term = float(np.mean(diff**2))
    sil_term = float(np.mean(dh**2) + np.mean(do**2))
    return ReconResult(
        value=rgb_term + sil_term,
        rgb_term=rgb_term,
        sil_term=sil_term,
        d_rgb=2.0 * diff / diff.size,
        d_alpha_human=2.0 * dh / dh.size,
        d_alpha_object=2.0 * do / do.size,
    )


@dataclass
class ContactResult:
    value: float
    d_contact_points: np.ndarray
    d_object_points: np.ndarray
    matched: np.ndarray  # (n_contact,) nearest object index, -1 when out of threshold


def contact_loss(contact_points, object_points, tau: float = CONTACT_TAU) -> ContactResult:
    """Mean thresholded nearest-neighbor distance from contact points to the
    object point set; gradient flows only to contributing pairs."""
    if tau <= 0:
        raise ValidationError("contact_loss: tau must be positive")
    cp = np.asarray(contact_points, dtype=float).reshape(-1, 3)
    op = np.asarray(object_points, dtype=float).reshape(-1, 3)
    d_cp = np.zeros_like(cp)
    d_op = np.zeros_like(op)
    if len(cp) == 0:
        return ContactResult(0.0, d_cp, d_op, np.zeros(0, dtype=int))
    if len(op) == 0:
        raise ValidationError("contact_loss: object point set is empty but contact points exist")
    dist, idx = cKDTree(op).query(cp)
    contributing = dist < tau  # the boundary d = tau contributes 0 (indicator side)
    matched = np.where(contributing, idx, -1)
    n = len(cp)
    value = float(dist[contributing].sum() / n)
    grad_mask = contributing & (dist > 0.0)
    if np.any(grad_mask):
        unit = (cp[grad_mask] - op[idx[grad_mask]]) / dist[grad_mask][:, None]
        d_cp[grad_mask] = unit / n
        np.subtract.at(d_op, idx[grad_mask], unit / n)
    return ContactResult(value, d_cp, d_op, matched)


@dataclass
class CollisionResult:
    value: float
    d_points: np.ndarray
    d_vertices: np.ndarray
    inside: np.ndarray  # boolean per human point


def collision_loss(human_points, object_mesh: TriMesh) -> CollisionResult:
    """Penetration depth of human points strictly inside the object mesh,
    normalized by the full human point count."""
    pts = np.asarray(human_points, dtype=float).reshape(-1, 3)
    n = len(pts)
    d_pts = np.zeros_like(pts)
    d_verts = np.zeros_like(np.asarray(object_mesh.vertices))
    if n == 0:
        raise ValidationError("collision_loss: empty human point set")
    inside = points_inside(pts, object_mesh)
    if not np.any(inside):
        return CollisionResult(0.0, d_pts, d_verts, inside)
    closest, face_idx, bary, dist = closest_points_on_mesh(pts[inside], object_mesh)
    value = float(dist.sum() / n)
    ok = dist > 1e-12
    unit = np.zeros_like(closest)
    unit[ok] = (pts[inside][ok] - closest[ok]) / dist[ok][:, None]
    d_pts[np.flatnonzero(inside)] = unit / n
    faces = object_mesh.faces[face_idx]
    for k in range(3):
        np.subtract.at(d_verts, faces[:, k], bary[:, k : k + 1] * unit / n)
    return CollisionResult(value, d_pts, d_verts, inside)


def appearance_grad(
    provider: GuidanceProvider,
    render: RenderOutput,
    prompt: str,
    rng: np.random.Generator,
    *,
    cfg_scale: float = 15.0,
    t_range: tuple[float, float] = DEFAULT_T_RANGE,
    retries: int = 3,
) -> np.ndarray:
    """One guidance round: sample a noise level, query the provider, return
    the weighted gradient image to chain through the renderer backward pass.

    Raises GuidanceUnavailableError after `retries` consecutive failures; the
    optimization loop treats that as a skipped step.
    """
    t = float(rng.uniform(*t_range))
    request = GuidanceRequest(image=render.rgb, prompt=prompt, t=t, cfg_scale=cfg_scale)
    last: Exception | None = None
    for attempt in range(max(1, retries)):
        try:
            resp = provider.guide(request)
            return resp.w_t * resp.gradient
        except GuidanceUnavailableError as e:
            last = e
            log.warning("guidance attempt %d/%d failed: %s", attempt + 1, retries, e)
    raise GuidanceUnavailableError(f"guidance failed after {retries} attempts: {last}")


def total_loss(
    recon_rgb: float,
    recon_sil: float,
    contact: float,
    collision: float,
    appr_grad_norm: float,
    weights: LossWeights,
) -> LossBreakdown:
    """Weighted aggregate; raises NumericalError naming any non-finite term."""
    parts = {
        "recon_rgb": recon_rgb,
        "recon_sil": recon_sil,
        "contact": contact,
        "collision": collision,
        "appearance": appr_grad_norm,
    }
    for name, v in parts.items():
        if not np.isfinite(v):
            raise NumericalError(f"total_loss: component {name!r} is not finite ({v})")
    recon = weights.w_recon_rgb * recon_rgb + weights.w_recon_sil * recon_sil
    c = weights.w_contact * contact
    col = weights.w_collision * collision
    return LossBreakdown(
        recon=recon,
        appr=float(appr_grad_norm),
        contact=c,
        collision=col,
        total=recon + c + col,
    )
