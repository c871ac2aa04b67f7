"""Differentiable forward splatting and its analytic backward pass.

Gaussians from all entities are merged, projected through the pinhole camera
(EWA-style: cov2 = J W S3 Wt Jt + 0.3 px^2 I), globally sorted by camera-space
depth (ties broken by input index), and alpha-composited front to back over
the 2D background. Compositing terminates per pixel once transmittance drops
below 1e-4. The backward pass replays the exact forward semantics, so its
output is the true reverse-mode derivative of the rendered image as computed.

Each splat only touches the pixel rectangle where its Mahalanobis distance
can stay below MAX_MAHAL_SQ; beyond that the weight is < exp(-100), far
below double-precision visibility, so the bound introduces no measurable
discontinuity (a hard 3-sigma cutoff would).

Rows are processed in independent horizontal bands. Per-pixel compositing
makes every band exactly independent, so results are bit-identical for any
band count or thread schedule; gradients are reduced over bands in fixed
order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .camera import Camera
from .errors import DimensionError
from .geometry import quat_normalize, quat_normalize_vjp, quat_to_mat, quat_to_mat_vjp

NEAR_PLANE = 0.01
COV_REG_PX2 = 0.3
EARLY_EXIT_T = 1e-4
MAX_MAHAL_SQ = 200.0


@dataclass(frozen=True)
class RenderOutput:
    """Composited image, per-entity silhouettes, and expected depth."""

    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    alphas: dict  # entity id -> (H, W) in [0, 1]
    depth: np.ndarray  # (H, W) meters, +inf where only background

    @property
    def alpha_human(self) -> np.ndarray:
        return self._alpha("human")

    @property
    def alpha_object(self) -> np.ndarray:
        return self._alpha("object")

    def _alpha(self, key: str) -> np.ndarray:
        if key in self.alphas:
            return self.alphas[key]
        return np.zeros(self.rgb.shape[:2])


@dataclass
class GaussianGrads:
    """Per-splat parameter gradients for one entity."""

    positions: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4)
    scales: np.ndarray  # (N, 3)
    opacities: np.ndarray  # (N,)
    colors: np.ndarray  # (N, 3)

    @classmethod
    def zeros(cls, n: int) -> "GaussianGrads":
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)))


class ProjectedGaussian(NamedTuple):
    mean2: np.ndarray | None
    cov2: np.ndarray | None
    depth: float | None
    culled: bool


def project_gaussian(camera: Camera, mean3, rot, scale) -> ProjectedGaussian:
    """Project one Gaussian; `culled` is set for splats behind the near plane."""
    x = camera.rotation @ np.asarray(mean3, float) + camera.translation
    if x[2] <= NEAR_PLANE:
        return ProjectedGaussian(None, None, None, True)
    qn = quat_normalize(np.asarray(rot, float))
    r3 = quat_to_mat(qn)
    m = r3 * np.asarray(scale, float)[None, :]
    cov3 = m @ m.T
    cov_c = camera.rotation @ cov3 @ camera.rotation.T
    z = x[2]
    j = np.array(
        [
            [camera.fx / z, 0.0, -camera.fx * x[0] / z**2],
            [0.0, camera.fy / z, -camera.fy * x[1] / z**2],
        ]
    )
    cov2 = j @ cov_c @ j.T + COV_REG_PX2 * np.eye(2)
    mean2 = np.array([camera.fx * x[0] / z + camera.cx, camera.fy * x[1] / z + camera.cy])
    return ProjectedGaussian(mean2, cov2, float(z), False)


@dataclass
class _Projected:
    """Batched projection of the merged, depth-sorted, visible splats."""

    n: int
    entity_ids: list
    entity_sizes: list
    src_entity: np.ndarray  # (n,) entity index of each kept splat
    src_index: np.ndarray  # (n,) index within its entity
    x_cam: np.ndarray  # (n, 3)
    q_raw: np.ndarray
    q_unit: np.ndarray
    r3: np.ndarray  # (n, 3, 3)
    scales: np.ndarray
    cov_cam: np.ndarray  # (n, 3, 3) W S3 Wt
    mean2: np.ndarray  # (n, 2)
    conic: np.ndarray  # (n, 3) = (a, b, c) of inv(cov2)
    cov2: np.ndarray  # (n, 3) = (a, b, c)
    opacities: np.ndarray
    colors: np.ndarray
    depths: np.ndarray
    bbox: np.ndarray  # (n, 4) x0, x1, y0, y1 (half-open), clipped to image


def _project_all(entities, camera: Camera) -> _Projected:
    pos = [np.asarray(g.positions) for g, _ in entities]
    n_total = sum(len(p) for p in pos)
    if n_total == 0:
        return _Projected(
            n=0,
            entity_ids=[e for _, e in entities],
            entity_sizes=[len(g) for g, _ in entities],
            src_entity=np.zeros(0, dtype=int),
            src_index=np.zeros(0, dtype=int),
            x_cam=np.zeros((0, 3)),
            q_raw=np.zeros((0, 4)),
            q_unit=np.zeros((0, 4)),
            r3=np.zeros((0, 3, 3)),
            scales=np.zeros((0, 3)),
            cov_cam=np.zeros((0, 3, 3)),
            mean2=np.zeros((0, 2)),
            conic=np.zeros((0, 3)),
            cov2=np.zeros((0, 3)),
            opacities=np.zeros(0),
            colors=np.zeros((0, 3)),
            depths=np.zeros(0),
            bbox=np.zeros((0, 4), dtype=int),
        )
    positions = np.concatenate(pos, axis=0)
    quats = np.concatenate([np.asarray(g.rotations) for g, _ in entities], axis=0)
    scales = np.concatenate([np.asarray(g.scales) for g, _ in entities], axis=0)
    opac = np.concatenate([np.asarray(g.opacities) for g, _ in entities], axis=0)
    colors = np.concatenate([np.asarray(g.colors) for g, _ in entities], axis=0)
    src_entity = np.concatenate(
        [np.full(len(p), i, dtype=int) for i, p in enumerate(pos)]
    )
    src_index = np.concatenate([np.arange(len(p)) for p in pos])

    x_cam = positions @ camera.rotation.T + camera.translation
    keep = x_cam[:, 2] > NEAR_PLANE

    x_cam = x_cam[keep]
    q_raw = quats[keep]
    scales = scales[keep]
    opac = opac[keep]
    colors = colors[keep]
    src_entity = src_entity[keep]
    src_index = src_index[keep]

    q_unit = quat_normalize(q_raw) if len(q_raw) else q_raw
    r3 = quat_to_mat(q_unit)
    m = r3 * scales[:, None, :]
    cov3 = m @ np.transpose(m, (0, 2, 1))
    cov_cam = np.einsum("ij,njk,lk->nil", camera.rotation, cov3, camera.rotation)

    z = x_cam[:, 2]
    fx, fy = camera.fx, camera.fy
    jx = fx / z
    jy = fy / z
    jxz = -fx * x_cam[:, 0] / z**2
    jyz = -fy * x_cam[:, 1] / z**2
    # cov2 entries via the 2x3 Jacobian rows r0=(jx,0,jxz), r1=(0,jy,jyz)
    c = cov_cam
    a2 = jx * (jx * c[:, 0, 0] + jxz * c[:, 0, 2]) + jxz * (jx * c[:, 2, 0] + jxz * c[:, 2, 2]) + COV_REG_PX2
    b2 = jx * (jy * c[:, 0, 1] + jyz * c[:, 0, 2]) + jxz * (jy * c[:, 2, 1] + jyz * c[:, 2, 2])
    c2 = jy * (jy * c[:, 1, 1] + jyz * c[:, 1, 2]) + jyz * (jy * c[:, 2, 1] + jyz * c[:, 2, 2]) + COV_REG_PX2
    det = a2 * c2 - b2 * b2
    conic = np.stack([c2 / det, -b2 / det, a2 / det], axis=1)
    mean2 = np.stack([fx * x_cam[:, 0] / z + camera.cx, fy * x_cam[:, 1] / z + camera.cy], axis=1)

    mid = 0.5 * (a2 + c2)
    lam_max = mid + np.sqrt(np.maximum((0.5 * (a2 - c2)) ** 2 + b2**2, 0.0))
    radius = np.sqrt(MAX_MAHAL_SQ * lam_max)
    x0 = np.clip(np.floor(mean2[:, 0] - radius), 0, camera.width).astype(int)
    x1 = np.clip(np.ceil(mean2[:, 0] + radius) + 1, 0, camera.width).astype(int)
    y0 = np.clip(np.floor(mean2[:, 1] - radius), 0, camera.height).astype(int)
    y1 = np.clip(np.ceil(mean2[:, 1] + radius) + 1, 0, camera.height).astype(int)
    onscreen = (x1 > x0) & (y1 > y0)

    def cut(arr):
        return arr[onscreen]

    order_src = np.argsort(z[onscreen], kind="stable")

    def sel(arr):
        return cut(arr)[order_src]

    bbox = np.stack([cut(x0)[order_src], cut(x1)[order_src], cut(y0)[order_src], cut(y1)[order_src]], axis=1)
    return _Projected(
        n=int(onscreen.sum()),
        entity_ids=[e for _, e in entities],
        entity_sizes=[len(g) for g, _ in entities],
        src_entity=sel(src_entity),
        src_index=sel(src_index),
        x_cam=sel(x_cam),
        q_raw=sel(q_raw),
        q_unit=sel(q_unit),
        r3=sel(r3),
        scales=sel(scales),
        cov_cam=sel(cov_cam),
        mean2=sel(mean2),
        conic=sel(conic),
        cov2=np.stack([sel(a2), sel(b2), sel(c2)], axis=1),
        opacities=sel(opac),
        colors=sel(colors),
        depths=sel(z),
        bbox=bbox,
    )


@dataclass
class RenderContext:
    camera: Camera
    proj: _Projected
    background: np.ndarray
    bands: list  # (row0, row1) per band
    records: list  # per band: list of (G, T_pre) or None per sorted splat


def _composite_band(
    proj: _Projected, camera: Camera, background: np.ndarray, row0: int, row1: int, keep_records: bool
):
    h = row1 - row0
    w = camera.width
    n_ent = len(proj.entity_ids)
    trans = np.ones((h, w))
    rgb = np.zeros((h, w, 3))
    alpha = np.zeros((n_ent, h, w))
    dsum = np.zeros((h, w))
    wsum = np.zeros((h, w))
    xs = np.arange(w, dtype=float)
    ys = np.arange(row0, row1, dtype=float)
    records = [] if keep_records else None
    for k in range(proj.n):
        bx0, bx1, by0, by1 = proj.bbox[k]
        y0 = max(by0, row0)
        y1 = min(by1, row1)
        if y0 >= y1:
            if keep_records:
                records.append(None)
            continue
        r0, r1 = y0 - row0, y1 - row0
        dx = xs[bx0:bx1] - proj.mean2[k, 0]
        dy = ys[r0:r1] - proj.mean2[k, 1]
        ca, cb, cc = proj.conic[k]
        rho = (ca * dx * dx)[None, :] + (cc * dy * dy)[:, None] + (2.0 * cb) * np.outer(dy, dx)
        g = np.exp(-0.5 * rho)
        t_pre = trans[r0:r1, bx0:bx1]
        a_eff = np.where(t_pre >= EARLY_EXIT_T, proj.opacities[k] * g, 0.0)
        wgt = a_eff * t_pre
        rgb[r0:r1, bx0:bx1] += wgt[:, :, None] * proj.colors[k]
        alpha[proj.src_entity[k], r0:r1, bx0:bx1] += wgt
        dsum[r0:r1, bx0:bx1] += wgt * proj.depths[k]
        wsum[r0:r1, bx0:bx1] += wgt
        if keep_records:
            records.append((g, t_pre.copy()))
        trans[r0:r1, bx0:bx1] = t_pre * (1.0 - a_eff)
    rgb += trans[:, :, None] * background[row0:row1]
    with np.errstate(invalid="ignore", divide="ignore"):
        depth = np.where(wsum > 1e-12, dsum / np.maximum(wsum, 1e-300), np.inf)
    return rgb, alpha, depth, records


def _bands_for(height: int, n_workers: int) -> list:
    n = max(1, min(int(n_workers), height))
    edges = np.linspace(0, height, n + 1).astype(int)
    return [(int(edges[i]), int(edges[i + 1])) for i in range(n) if edges[i + 1] > edges[i]]


def _forward(entities, camera, background, n_workers, keep_records):
    background = np.asarray(background, dtype=float)
    if background.shape != (camera.height, camera.width, 3):
        raise DimensionError(
            f"render: background {background.shape} does not match camera "
            f"({camera.height}, {camera.width}, 3)"
        )
    proj = _project_all(entities, camera)
    bands = _bands_for(camera.height, n_workers)

    def run(band):
        return _composite_band(proj, camera, background, band[0], band[1], keep_records)

    if len(bands) > 1 and n_workers > 1:
        with ThreadPoolExecutor(max_workers=len(bands)) as pool:
            results = list(pool.map(run, bands))
    else:
        results = [run(b) for b in bands]

    rgb = np.concatenate([r[0] for r in results], axis=0)
    alpha = np.concatenate([r[1] for r in results], axis=1)
    depth = np.concatenate([r[2] for r in results], axis=0)
    alphas = {eid: alpha[i] for i, eid in enumerate(proj.entity_ids)}
    out = RenderOutput(rgb=rgb, alphas=alphas, depth=depth)
    ctx = RenderContext(
        camera=camera, proj=proj, background=background, bands=bands, records=[r[3] for r in results]
    )
    return out, ctx


def render(entities, camera: Camera, background, *, n_workers: int = 1) -> RenderOutput:
    """Composite entity splats over the background from `camera`.

    `entities` is a list of (GaussianSet, entity_id) pairs; per-entity alpha
    maps accumulate each entity's composited weight.
    """
    out, _ = _forward(entities, camera, background, n_workers, keep_records=False)
    return out


def render_with_grad(entities, camera: Camera, background, *, n_workers: int = 1):
    """Forward pass that also returns the context consumed by render_backward."""
    return _forward(entities, camera, background, n_workers, keep_records=True)


def _band_backward(ctx: RenderContext, band_idx: int, d_rgb, d_alphas_arr, background):
    proj = ctx.proj
    row0, row1 = ctx.bands[band_idx]
    records = ctx.records[band_idx]
    w = ctx.camera.width
    n_ent = len(proj.entity_ids)
    behind_rgb = np.array(background[row0:row1], dtype=float)
    behind_a = np.zeros((n_ent, row1 - row0, w))
    xs = np.arange(w, dtype=float)
    ys = np.arange(row0, row1, dtype=float)

    d_op = np.zeros(proj.n)
    d_col = np.zeros((proj.n, 3))
    d_conic = np.zeros((proj.n, 3))
    d_mean2 = np.zeros((proj.n, 2))

    for k in reversed(range(proj.n)):
        rec = records[k]
        if rec is None:
            continue
        g, t_pre = rec
        bx0, bx1, by0, by1 = proj.bbox[k]
        y0 = max(by0, row0)
        y1 = min(by1, row1)
        r0, r1 = y0 - row0, y1 - row0
        e = proj.src_entity[k]
        active = t_pre >= EARLY_EXIT_T
        a_eff = np.where(active, proj.opacities[k] * g, 0.0)

        dc = d_rgb[y0:y1, bx0:bx1]
        d_alpha_sl = d_alphas_arr[:, y0:y1, bx0:bx1]
        col_term = np.einsum("hwc,hwc->hw", dc, proj.colors[k] - behind_rgb[r0:r1, bx0:bx1])
        ind = np.zeros(n_ent)
        ind[e] = 1.0
        a_term = np.einsum(
            "ehw,e->hw", d_alpha_sl, ind
        ) - np.einsum("ehw,ehw->hw", d_alpha_sl, behind_a[:, r0:r1, bx0:bx1])
        d_alpha_k = np.where(active, t_pre * (col_term + a_term), 0.0)

        wgt = a_eff * t_pre
        d_col[k] = np.einsum("hwc,hw->c", dc, wgt)
        d_op[k] = float(np.sum(d_alpha_k * g))
        d_g = d_alpha_k * proj.opacities[k]
        d_rho = -0.5 * d_g * g

        dx = xs[bx0:bx1] - proj.mean2[k, 0]
        dy = ys[r0:r1] - proj.mean2[k, 1]
        sx = d_rho.sum(axis=0)
        sy = d_rho.sum(axis=1)
        sxy = float(dy @ d_rho @ dx)
        d_conic[k, 0] = float(sx @ (dx * dx))
        d_conic[k, 1] = 2.0 * sxy
        d_conic[k, 2] = float(sy @ (dy * dy))
        ca, cb, cc = proj.conic[k]
        # rho = ca dx^2 + 2 cb dx dy + cc dy^2 with (dx, dy) = pixel - mean2
        d_mean2[k, 0] = float(-2.0 * ca * (sx @ dx) - 2.0 * cb * (sy @ dy))
        d_mean2[k, 1] = float(-2.0 * cc * (sy @ dy) - 2.0 * cb * (sx @ dx))

        # fold this splat into the behind-accumulators (a_eff is 0 when inactive)
        behind_rgb[r0:r1, bx0:bx1] = (
            a_eff[:, :, None] * proj.colors[k] + (1.0 - a_eff)[:, :, None] * behind_rgb[r0:r1, bx0:bx1]
        )
        behind_a[:, r0:r1, bx0:bx1] *= (1.0 - a_eff)[None, :, :]
        behind_a[e, r0:r1, bx0:bx1] += a_eff
    return d_op, d_col, d_conic, d_mean2


def render_backward(ctx: RenderContext, d_rgb, d_alphas: dict | None = None) -> dict:
    """Exact reverse-mode derivative of the forward compositing.

    `d_rgb` is dL/d(rgb); `d_alphas` maps entity id -> dL/d(alpha map).
    Returns {entity id: GaussianGrads} aligned with the input sets.
    """
    proj = ctx.proj
    cam = ctx.camera
    d_rgb = np.asarray(d_rgb, dtype=float)
    if d_rgb.shape != (cam.height, cam.width, 3):
        raise DimensionError(f"render_backward: d_rgb must be ({cam.height}, {cam.width}, 3)")
    d_alphas = d_alphas or {}
    d_alphas_arr = np.zeros((len(proj.entity_ids), cam.height, cam.width))
    for i, eid in enumerate(proj.entity_ids):
        if eid in d_alphas:
            arr = np.asarray(d_alphas[eid], dtype=float)
            if arr.shape != (cam.height, cam.width):
                raise DimensionError("render_backward: alpha cotangent size mismatch")
            d_alphas_arr[i] = arr

    d_op = np.zeros(proj.n)
    d_col = np.zeros((proj.n, 3))
    d_conic = np.zeros((proj.n, 3))
    d_mean2 = np.zeros((proj.n, 2))
    for bi in range(len(ctx.bands)):
        po, pc, pk, pm = _band_backward(ctx, bi, d_rgb, d_alphas_arr, ctx.background)
        d_op += po
        d_col += pc
        d_conic += pk
        d_mean2 += pm

    grads = {eid: GaussianGrads.zeros(n) for eid, n in zip(proj.entity_ids, proj.entity_sizes)}
    if proj.n == 0:
        return grads

    # conic = inv(cov2): d cov2 = -conic . dLambda . conic (symmetrized cotangent)
    ca, cb, cc = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 2]
    la, lb, lc = d_conic[:, 0], 0.5 * d_conic[:, 1], d_conic[:, 2]
    # M = [[la, lb], [lb, lc]], L = [[ca, cb], [cb, cc]]; dS = -L M L
    m00 = ca * la + cb * lb
    m01 = ca * lb + cb * lc
    m10 = cb * la + cc * lb
    m11 = cb * lb + cc * lc
    ds_a = -(m00 * ca + m01 * cb)
    ds_b = -(m00 * cb + m01 * cc)
    ds_b2 = -(m10 * ca + m11 * cb)
    ds_c = -(m10 * cb + m11 * cc)
    ds_b = 0.5 * (ds_b + ds_b2)  # keep the cotangent symmetric
    d_cov2 = np.stack([np.stack([ds_a, ds_b], -1), np.stack([ds_b, ds_c], -1)], axis=1)

    z = proj.x_cam[:, 2]
    fx, fy = cam.fx, cam.fy
    jx = fx / z
    jy = fy / z
    jxz = -fx * proj.x_cam[:, 0] / z**2
    jyz = -fy * proj.x_cam[:, 1] / z**2
    jmat = np.zeros((proj.n, 2, 3))
    jmat[:, 0, 0] = jx
    jmat[:, 0, 2] = jxz
    jmat[:, 1, 1] = jy
    jmat[:, 1, 2] = jyz

    d_j = 2.0 * np.einsum("nab,nbc,ndc->nad", d_cov2, jmat, proj.cov_cam)
    d_cov_cam = np.einsum("nba,nbc,ncd->nad", jmat, d_cov2, jmat)
    d_cov3 = np.einsum("ji,njk,kl->nil", cam.rotation, d_cov_cam, cam.rotation)
    m = proj.r3 * proj.scales[:, None, :]
    d_m = 2.0 * np.einsum("nab,nbc->nac", d_cov3, m)
    d_r3 = d_m * proj.scales[:, None, :]
    d_scales = np.einsum("nik,nik->nk", proj.r3, d_m)
    d_qu = quat_to_mat_vjp(proj.q_unit, d_r3)
    d_q = quat_normalize_vjp(proj.q_raw, d_qu)

    d_x = np.zeros((proj.n, 3))
    d_x[:, 0] += d_j[:, 0, 2] * (-fx / z**2)
    d_x[:, 1] += d_j[:, 1, 2] * (-fy / z**2)
    d_x[:, 2] += (
        d_j[:, 0, 0] * (-fx / z**2)
        + d_j[:, 1, 1] * (-fy / z**2)
        + d_j[:, 0, 2] * (2.0 * fx * proj.x_cam[:, 0] / z**3)
        + d_j[:, 1, 2] * (2.0 * fy * proj.x_cam[:, 1] / z**3)
    )
    d_x[:, 0] += d_mean2[:, 0] * jx
    d_x[:, 1] += d_mean2[:, 1] * jy
    d_x[:, 2] += -d_mean2[:, 0] * fx * proj.x_cam[:, 0] / z**2 - d_mean2[:, 1] * fy * proj.x_cam[:, 1] / z**2
    d_pos = d_x @ cam.rotation

    for i, eid in enumerate(proj.entity_ids):
        mask = proj.src_entity == i
        idx = proj.src_index[mask]
        g = grads[eid]
        np.add.at(g.positions, idx, d_pos[mask])
        np.add.at(g.rotations, idx, d_q[mask])
        np.add.at(g.scales, idx, d_scales[mask])
        np.add.at(g.opacities, idx, d_op[mask])
        np.add.at(g.colors, idx, d_col[mask])
    return grads
