"""Evaluation metrics: root alignment, Chamfer distance, contact F1,
collision ratio, and ICP rigid registration."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import ValidationError
from .meshes import TriMesh, points_inside, surface_distances


def _points_of(obj) -> np.ndarray:
    if isinstance(obj, TriMesh):
        return np.asarray(obj.vertices, dtype=float)
    return np.asarray(obj, dtype=float).reshape(-1, 3)


def _like(obj, points):
    if isinstance(obj, TriMesh):
        return obj.with_vertices(points)
    return points


def root_align(pred_human, gt_human, pred_extras=(), *, pred_root, gt_root):
    """Translate the prediction so its root joint coincides with the GT root.

    The same translation is applied to every extra mesh/point set (the object
    moves with the human frame). Returns (aligned human, aligned extras,
    translation).
    """
    if pred_root is None or gt_root is None:
        raise ValidationError("root_align: both root positions are required")
    shift = np.asarray(gt_root, dtype=float) - np.asarray(pred_root, dtype=float)
    aligned = _like(pred_human, _points_of(pred_human) + shift)
    extras = [_like(e, _points_of(e) + shift) for e in pred_extras]
    return aligned, extras, shift


def chamfer_cm(a, b) -> float:
    """Symmetric mean-of-means nearest-neighbor distance, in centimeters."""
    pa, pb = _points_of(a), _points_of(b)
    if len(pa) == 0 or len(pb) == 0:
        raise ValidationError("chamfer_cm: point sets must be non-empty")
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    return float(100.0 * 0.5 * (d_ab.mean() + d_ba.mean()))


class ContactScore(NamedTuple):
    precision: float
    recall: float
    f1: float
    no_contact: bool = False


def contact_f1(
    pred_human_mesh: TriMesh,
    pred_object_mesh: TriMesh,
    gt_contact: np.ndarray,
    threshold: float = 0.05,
) -> ContactScore:
    """F1 of the predicted contact map (human vertices within `threshold` of
    the object surface) against the GT boolean map."""
    gt = np.asarray(gt_contact, dtype=bool).reshape(-1)
    if len(gt) != len(pred_human_mesh.vertices):
        raise ValidationError(
            f"contact_f1: gt map has {len(gt)} entries for {len(pred_human_mesh.vertices)} vertices"
        )
    pred = surface_distances(pred_human_mesh.vertices, pred_object_mesh) < threshold
    tp = float(np.sum(pred & gt))
    fp = float(np.sum(pred & ~gt))
    fn = float(np.sum(~pred & gt))
    if tp + fp + fn == 0.0:
        return ContactScore(0.0, 0.0, 0.0, no_contact=True)
    p = tp / (tp + fp) if tp + fp > 0 else 0.0
    r = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2.0 * p * r / (p + r) if p + r > 0 else 0.0
    return ContactScore(p, r, f1, no_contact=False)


def collision_ratio(human_vertices, object_mesh: TriMesh) -> float:
    """Fraction of human vertices strictly inside the object mesh."""
    pts = _points_of(human_vertices)
    if len(pts) == 0:
        raise ValidationError("collision_ratio: empty vertex set")
    return float(np.mean(points_inside(pts, object_mesh)))


@dataclass
class IcpResult:
    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)
    residuals: list[float]
    iterations: int

    def transform(self, points) -> np.ndarray:
        return _points_of(points) @ self.rotation.T + self.translation


def _kabsch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ca = src.mean(axis=0)
    cb = dst.mean(axis=0)
    h = (src - ca).T @ (dst - cb)
    u, s, vt = np.linalg.svd(h)
    if s[-1] < 1e-12 * max(s[0], 1e-300):
        raise ValidationError("icp_align: degenerate geometry (rank-deficient correspondence)")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return rot, cb - rot @ ca


def icp_align(src, dst, max_iters: int = 50, tol: float = 1e-6) -> IcpResult:
    """Iterative closest point: alternate nearest-neighbor correspondence and
    SVD rigid fitting until the mean residual stops improving."""
    src = _points_of(src)
    dst = _points_of(dst)
    if len(src) < 3 or len(dst) < 3:
        raise ValidationError("icp_align: need at least 3 points in each set")
    tree = cKDTree(dst)
    rot = np.eye(3)
    trans = np.zeros(3)
    residuals: list[float] = []
    for it in range(max_iters):
        moved = src @ rot.T + trans
        dist, idx = tree.query(moved)
        rot, trans = _kabsch(src, dst[idx])
        moved = src @ rot.T + trans
        resid = float(np.linalg.norm(moved - dst[idx], axis=1).mean())
        residuals.append(resid)
        if len(residuals) > 1 and abs(residuals[-2] - resid) < tol:
            break
    return IcpResult(rotation=rot, translation=trans, residuals=residuals, iterations=len(residuals))


REPORT_KEYS = ("cd_human_cm", "cd_object_cm", "contact_p", "contact_r", "contact_f1", "collision")


def evaluate_sample(
    pred_human_mesh: TriMesh,
    pred_object_mesh: TriMesh,
    gt_human_mesh: TriMesh,
    gt_object_mesh: TriMesh,
    gt_contact: np.ndarray | None,
    *,
    pred_root,
    gt_root,
) -> dict:
    """Root-aligned metric report with the fixed downstream column names."""
    aligned_human, (aligned_object,), _ = root_align(
        pred_human_mesh, gt_human_mesh, [pred_object_mesh], pred_root=pred_root, gt_root=gt_root
    )
    if gt_contact is None:
        gt_contact = surface_distances(gt_human_mesh.vertices, gt_object_mesh) < 0.05
    score = contact_f1(aligned_human, aligned_object, gt_contact)
    return {
        "cd_human_cm": chamfer_cm(aligned_human, gt_human_mesh),
        "cd_object_cm": chamfer_cm(aligned_object, gt_object_mesh),
        "contact_p": score.precision,
        "contact_r": score.recall,
        "contact_f1": score.f1,
        "collision": collision_ratio(aligned_human.vertices, aligned_object),
    }
