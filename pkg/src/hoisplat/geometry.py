"""Quaternion and rotation helpers with hand-written reverse-mode derivatives.

Quaternions are stored as (w, x, y, z). Every `*_vjp` takes the cotangent of
the op's output and returns cotangents of its inputs; together these form the
small fixed set of differentiable primitives the FK/LBS and splat projection
chains are built from. All functions accept single values or leading batch
dimensions where noted.
"""

from __future__ import annotations

import numpy as np


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Unit-normalize quaternions along the last axis."""
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_normalize_vjp(q: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    n = q / norm
    return (d_out - n * np.sum(n * d_out, axis=-1, keepdims=True)) / norm


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a ⊗ b, broadcasting over leading dims."""
    aw, av = a[..., :1], a[..., 1:]
    bw, bv = b[..., :1], b[..., 1:]
    w = aw * bw - np.sum(av * bv, axis=-1, keepdims=True)
    v = aw * bv + bw * av + np.cross(av, bv)
    return np.concatenate([w, v], axis=-1)


def quat_multiply_vjp(
    a: np.ndarray, b: np.ndarray, d_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    aw, av = a[..., :1], a[..., 1:]
    bw, bv = b[..., :1], b[..., 1:]
    dw, dv = d_out[..., :1], d_out[..., 1:]
    da_w = dw * bw + np.sum(dv * bv, axis=-1, keepdims=True)
    da_v = -dw * bv + bw * dv + np.cross(bv, dv)
    db_w = dw * aw + np.sum(dv * av, axis=-1, keepdims=True)
    db_v = -dw * av + aw * dv - np.cross(av, dv)
    return (
        np.concatenate([da_w, da_v], axis=-1),
        np.concatenate([db_w, db_v], axis=-1),
    )


def quat_to_mat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion; shape (..., 4) -> (..., 3, 3)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    row0 = np.stack(
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1
    )
    row1 = np.stack(
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1
    )
    row2 = np.stack(
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1
    )
    return np.stack([row0, row1, row2], axis=-2)


def quat_to_mat_vjp(q: np.ndarray, d_mat: np.ndarray) -> np.ndarray:
    """Cotangent of quat_to_mat: contract dL/dR with the partials dR/dq."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    d = d_mat
    dw = 2 * (
        -z * d[..., 0, 1] + y * d[..., 0, 2]
        + z * d[..., 1, 0] - x * d[..., 1, 2]
        - y * d[..., 2, 0] + x * d[..., 2, 1]
    )
    dx = 2 * (
        y * d[..., 0, 1] + z * d[..., 0, 2]
        + y * d[..., 1, 0] - 2 * x * d[..., 1, 1] - w * d[..., 1, 2]
        + z * d[..., 2, 0] + w * d[..., 2, 1] - 2 * x * d[..., 2, 2]
    )
    dy = 2 * (
        -2 * y * d[..., 0, 0] + x * d[..., 0, 1] + w * d[..., 0, 2]
        + x * d[..., 1, 0] + z * d[..., 1, 2]
        - w * d[..., 2, 0] + z * d[..., 2, 1] - 2 * y * d[..., 2, 2]
    )
    dz = 2 * (
        -2 * z * d[..., 0, 0] - w * d[..., 0, 1] + x * d[..., 0, 2]
        + w * d[..., 1, 0] - 2 * z * d[..., 1, 1] + y * d[..., 1, 2]
        + x * d[..., 2, 0] + y * d[..., 2, 1]
    )
    return np.stack([dw, dx, dy, dz], axis=-1)


_SMALL_ANGLE = 1e-8


def axis_angle_to_quat(v: np.ndarray) -> np.ndarray:
    """Exponential map: axis-angle 3-vector -> unit quaternion.

    Uses series expansions below _SMALL_ANGLE so the map and its derivative
    stay exact through v = 0.
    """
    v = np.asarray(v, dtype=float)
    phi = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * phi
    small = phi < _SMALL_ANGLE
    # k = sin(phi/2)/phi, finite at 0
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(small, 0.5 - phi * phi / 48.0, np.sin(half) / np.where(small, 1.0, phi))
    w = np.cos(half)
    return np.concatenate([w, k * v], axis=-1)


def axis_angle_to_quat_vjp(v: np.ndarray, d_q: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    phi = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * phi
    small = phi < _SMALL_ANGLE
    safe_phi = np.where(small, 1.0, phi)
    k = np.where(small, 0.5 - phi * phi / 48.0, np.sin(half) / safe_phi)
    # g = (d/dphi k)/phi and h = (d/dphi cos(phi/2))/phi, both finite at 0
    g = np.where(
        small,
        -1.0 / 24.0 + phi * phi / 960.0,
        (0.5 * np.cos(half) - k) / (safe_phi * safe_phi),
    )
    h = np.where(small, -0.25 + phi * phi / 96.0, -0.5 * np.sin(half) / safe_phi)
    dw, dvec = d_q[..., :1], d_q[..., 1:]
    return dw * h * v + k * dvec + g * np.sum(dvec * v, axis=-1, keepdims=True) * v


def rotate_points(R: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Apply rotation matrices (..., 3, 3) to points (..., 3)."""
    return np.einsum("...ij,...j->...i", R, p)


def look_at(eye: np.ndarray, target: np.ndarray, up: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera rigid transform, OpenCV convention (x right, y down, z forward).

    Returns (R, t) with x_cam = R @ x_world + t.
    """
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    zn = np.linalg.norm(z)
    if zn < 1e-12:
        raise ValueError("look_at: eye and target coincide")
    z = z / zn
    x = np.cross(z, np.asarray(up, dtype=float))
    xn = np.linalg.norm(x)
    if xn < 1e-9:
        # Viewing straight along up: pick any perpendicular right axis.
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
        xn = np.linalg.norm(x)
        if xn < 1e-9:
            x = np.cross(z, np.array([0.0, 0.0, 1.0]))
            xn = np.linalg.norm(x)
    x = x / xn
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=0)
    t = -R @ eye
    return R, t
