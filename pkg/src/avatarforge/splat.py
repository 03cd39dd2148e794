"""Tile-based CPU rasterizer for 3D Gaussians with an analytic backward pass.

Splats are projected with the pinhole Jacobian, depth-sorted globally
(stable index tie-break), binned to 16x16 tiles, and composited front to
back per pixel. A naive per-pixel reference compositor implements the same
contract sequentially and serves as the testing oracle.

Conventions fixed here: a 0.3 px^2 isotropic dilation is added to every
projected covariance; a contribution is skipped when alpha_i * G_i < the
skip threshold (evaluated as a Mahalanobis cutoff, which is the same
predicate); compositing stops when transmittance drops below 1e-4; the
depth channel is the alpha-weighted mean splat depth and is not
differentiated.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _splat_kernels as kernels
from .camera import Camera
from .gaussians import GaussianSet, sigmoid
from .rotations import (normalize_jacobian, quat_to_mat, quat_to_mat_jacobian)

DILATION_PX2 = 0.3


@dataclass(frozen=True)
class RendererConfig:
    tile_size: int = 16
    skip_threshold: float = 1.0 / 255.0
    stop_transmittance: float = 1e-4
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)


DEFAULT_CONFIG = RendererConfig()


@dataclass
class RenderOutput:
    color: np.ndarray  # [H, W, 3] in [0, 1]
    alpha: np.ndarray  # [H, W] in [0, 1]
    depth: np.ndarray  # [H, W] alpha-weighted mean splat depth (0 where empty)

    def validate(self) -> None:
        for name in ("color", "alpha", "depth"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"render output {name} contains non-finite values")
        if self.alpha.min() < 0.0 or self.alpha.max() > 1.0 + 1e-9:
            raise ValueError("alpha out of [0, 1]")


@dataclass
class ProjectedSplats:
    """Screen-space splats plus intermediates cached for the backward pass."""

    valid: np.ndarray  # [N] bool, survives the depth cull
    mean2d: np.ndarray  # [N, 2] pixels
    cov2d: np.ndarray  # [N, 2, 2] dilated
    depth: np.ndarray  # [N] camera-space z
    opacity: np.ndarray  # [N]
    color: np.ndarray  # [N, 3]
    qcov: np.ndarray  # [N, 3] packed inverse covariance (xx, xy, yy)
    m_cut: np.ndarray  # [N] Mahalanobis skip cutoff
    radius: np.ndarray  # [N] conservative pixel radius of the skip boundary
    t_cam: np.ndarray  # [N, 3]
    jproj: np.ndarray  # [N, 2, 3]
    cov_cam: np.ndarray  # [N, 3, 3]
    rot_mat: np.ndarray  # [N, 3, 3] from normalized quaternions
    scale2: np.ndarray  # [N, 3] squared scales


def project_gaussians(g: GaussianSet, cam: Camera,
                      config: RendererConfig = DEFAULT_CONFIG) -> ProjectedSplats:
    """Project every Gaussian to screen space; culled members have valid=False."""
    n = len(g)
    pos = g.position.astype(np.float64)
    quat = g.rotation.astype(np.float64)
    quat = quat / np.linalg.norm(quat, axis=1, keepdims=True)
    scale = np.exp(g.log_scale.astype(np.float64))
    opacity = sigmoid(g.opacity_logit.astype(np.float64))
    color = g.color.astype(np.float64)

    rot_w = cam.rotation
    t_cam = pos @ rot_w.T + cam.translation
    tz = t_cam[:, 2]
    valid = (tz > cam.near) & (tz < cam.far)

    safe_z = np.where(valid, tz, 1.0)
    mean2d = np.empty((n, 2))
    mean2d[:, 0] = cam.fx * t_cam[:, 0] / safe_z + cam.cx
    mean2d[:, 1] = cam.fy * t_cam[:, 1] / safe_z + cam.cy

    R = quat_to_mat(quat)  # [N, 3, 3]
    s2 = scale**2
    cov_w = np.einsum("nab,nb,ncb->nac", R, s2, R)
    cov_c = np.einsum("ab,nbc,dc->nad", rot_w, cov_w, rot_w)

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / safe_z
    J[:, 0, 2] = -cam.fx * t_cam[:, 0] / safe_z**2
    J[:, 1, 1] = cam.fy / safe_z
    J[:, 1, 2] = -cam.fy * t_cam[:, 1] / safe_z**2
    cov2d = np.einsum("nab,nbc,ndc->nad", J, cov_c, J)
    cov2d[:, 0, 0] += DILATION_PX2
    cov2d[:, 1, 1] += DILATION_PX2

    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    qcov = np.stack([c / det, -b / det, a / det], axis=1)
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))

    if config.skip_threshold > 0:
        with np.errstate(divide="ignore"):
            m_cut = 2.0 * (np.log(opacity) - np.log(config.skip_threshold))
    else:
        m_cut = np.full(n, np.inf)
    radius = np.sqrt(np.maximum(m_cut, 0.0) * lam_max)

    return ProjectedSplats(valid=valid, mean2d=mean2d, cov2d=cov2d, depth=tz,
                           opacity=opacity, color=color, qcov=qcov,
                           m_cut=m_cut, radius=radius, t_cam=t_cam, jproj=J,
                           cov_cam=cov_c, rot_mat=R, scale2=s2)


def _depth_order(proj: ProjectedSplats) -> np.ndarray:
    """Indices of valid splats sorted by depth ascending, index tie-break."""
    idx = np.nonzero(proj.valid)[0]
    order = np.argsort(proj.depth[idx], kind="stable")
    return idx[order]


def _tile_lists(proj: ProjectedSplats, order: np.ndarray, width: int, height: int,
                tile_size: int) -> tuple[np.ndarray, np.ndarray]:
    """CSR tile lists of rank indices, each list in global depth order."""
    n_tx = (width + tile_size - 1) // tile_size
    n_ty = (height + tile_size - 1) // tile_size
    n_tiles = n_tx * n_ty
    if order.size == 0:
        return np.zeros(n_tiles + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    mx = proj.mean2d[order, 0]
    my = proj.mean2d[order, 1]
    r = proj.radius[order]
    tx0 = np.clip(np.floor((mx - r) / tile_size).astype(np.int64), 0, n_tx - 1)
    tx1 = np.clip(np.floor((mx + r) / tile_size).astype(np.int64), 0, n_tx - 1)
    ty0 = np.clip(np.floor((my - r) / tile_size).astype(np.int64), 0, n_ty - 1)
    ty1 = np.clip(np.floor((my + r) / tile_size).astype(np.int64), 0, n_ty - 1)
    off_image = (mx + r < 0) | (mx - r > width) | (my + r < 0) | (my - r > height) | (r <= 0)
    spans_x = np.where(off_image, 0, tx1 - tx0 + 1)
    spans_y = np.where(off_image, 0, ty1 - ty0 + 1)
    counts = spans_x * spans_y
    total = int(counts.sum())
    if total == 0:
        return np.zeros(n_tiles + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    rank = np.repeat(np.arange(order.size, dtype=np.int64), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total, dtype=np.int64) - np.repeat(starts, counts)
    sx = np.repeat(spans_x, counts)
    tile_x = np.repeat(tx0, counts) + local % np.maximum(sx, 1)
    tile_y = np.repeat(ty0, counts) + local // np.maximum(sx, 1)
    tile_id = tile_y * n_tx + tile_x
    perm = np.lexsort((rank, tile_id))
    entries = rank[perm]
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    np.add.at(offsets, tile_id + 1, 1)
    np.cumsum(offsets, out=offsets)
    return offsets, entries


def _rank_arrays(proj: ProjectedSplats, order: np.ndarray):
    return (np.ascontiguousarray(proj.mean2d[order]),
            np.ascontiguousarray(proj.qcov[order]),
            np.ascontiguousarray(proj.m_cut[order]),
            np.ascontiguousarray(proj.opacity[order]),
            np.ascontiguousarray(proj.color[order]),
            np.ascontiguousarray(proj.depth[order]))


def render(g: GaussianSet, cam: Camera,
           config: RendererConfig = DEFAULT_CONFIG) -> RenderOutput:
    """Composite all splats front to back; see the module docstring for rules."""
    proj = project_gaussians(g, cam, config)
    order = _depth_order(proj)
    offsets, entries = _tile_lists(proj, order, cam.width, cam.height, config.tile_size)
    mean2d, qcov, m_cut, opacity, color, depth = _rank_arrays(proj, order)
    out_rgb = np.zeros((cam.height, cam.width, 3))
    out_alpha = np.zeros((cam.height, cam.width))
    out_depth = np.zeros((cam.height, cam.width))
    bg = np.asarray(config.background, dtype=np.float64)
    kernels.forward_kernel(cam.height, cam.width, config.tile_size, offsets, entries,
                           mean2d, qcov, m_cut, opacity, color, depth,
                           bg, config.stop_transmittance,
                           out_rgb, out_alpha, out_depth)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_depth = np.where(out_alpha > 0, out_depth / np.maximum(out_alpha, 1e-300), 0.0)
    return RenderOutput(color=out_rgb, alpha=out_alpha, depth=mean_depth)


def render_reference(g: GaussianSet, cam: Camera,
                     config: RendererConfig = DEFAULT_CONFIG) -> RenderOutput:
    """Naive per-pixel ordered compositor; the correctness oracle for render()."""
    proj = project_gaussians(g, cam, config)
    order = _depth_order(proj)
    mean2d, qcov, m_cut, opacity, color, depth = _rank_arrays(proj, order)
    h, w = cam.height, cam.width
    bg = np.asarray(config.background, dtype=np.float64)
    out_rgb = np.zeros((h, w, 3))
    out_alpha = np.zeros((h, w))
    out_depth = np.zeros((h, w))
    for py in range(h):
        for px in range(w):
            cx, cy = px + 0.5, py + 0.5
            dx = cx - mean2d[:, 0]
            dy = cy - mean2d[:, 1]
            m = qcov[:, 0] * dx * dx + 2.0 * qcov[:, 1] * dx * dy + qcov[:, 2] * dy * dy
            a = np.where(m > m_cut, 0.0, opacity * np.exp(-0.5 * m))
            trans_before = np.concatenate([[1.0], np.cumprod(1.0 - a)[:-1]])
            alive = trans_before >= config.stop_transmittance
            wgt = a * trans_before * alive
            out_rgb[py, px] = wgt @ color
            out_alpha[py, px] = wgt.sum()
            out_depth[py, px] = wgt @ depth
            t_final = trans_before[-1] * (1.0 - a[-1]) if a.size else 1.0
            if a.size and not alive[-1]:
                # Find the transmittance at the stop point.
                stop = int(np.argmin(alive))
                t_final = trans_before[stop]
            out_rgb[py, px] += t_final * bg
    mean_depth = np.where(out_alpha > 0, out_depth / np.maximum(out_alpha, 1e-300), 0.0)
    return RenderOutput(color=out_rgb, alpha=out_alpha, depth=mean_depth)


@dataclass
class RenderGrads:
    position: np.ndarray  # [N, 3]
    rotation: np.ndarray  # [N, 4]
    log_scale: np.ndarray  # [N, 3]
    opacity_logit: np.ndarray  # [N]
    color: np.ndarray  # [N, 3]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"position": self.position, "rotation": self.rotation,
                "log_scale": self.log_scale, "opacity_logit": self.opacity_logit,
                "color": self.color}


def render_backward(g: GaussianSet, cam: Camera, grad_color: np.ndarray,
                    grad_alpha: np.ndarray | None = None,
                    config: RendererConfig = DEFAULT_CONFIG) -> RenderGrads:
    """Gradients of sum(grad_color * color + grad_alpha * alpha) w.r.t. attributes.

    Culled and threshold-skipped contributions get exactly zero gradient,
    matching the forward cutoffs. The depth channel is not differentiated.
    """
    n = len(g)
    proj = project_gaussians(g, cam, config)
    order = _depth_order(proj)
    offsets, entries = _tile_lists(proj, order, cam.width, cam.height, config.tile_size)
    mean2d, qcov, m_cut, opacity, color, depth = _rank_arrays(proj, order)
    grad_color = np.ascontiguousarray(grad_color, dtype=np.float64)
    if grad_alpha is None:
        grad_alpha = np.zeros((cam.height, cam.width))
    grad_alpha = np.ascontiguousarray(grad_alpha, dtype=np.float64)
    bg = np.asarray(config.background, dtype=np.float64)

    entry_grads = np.zeros((entries.shape[0], 9))
    kernels.backward_kernel(cam.height, cam.width, config.tile_size, offsets, entries,
                            mean2d, qcov, m_cut, opacity, color, depth,
                            bg, config.stop_transmittance,
                            grad_color, grad_alpha, entry_grads)

    # Deterministic reduction: entry order is fixed by the binning, not by
    # the thread schedule.
    per_rank = np.zeros((order.size, 9))
    np.add.at(per_rank, entries, entry_grads)

    gc = np.zeros((n, 3))
    g_alpha_raw = np.zeros(n)
    gm = np.zeros((n, 2))
    gq = np.zeros((n, 2, 2))
    gc[order] = per_rank[:, 0:3]
    g_alpha_raw[order] = per_rank[:, 3]
    gm[order] = per_rank[:, 4:6]
    gq[order, 0, 0] = per_rank[:, 6]
    gq[order, 0, 1] = per_rank[:, 7]
    gq[order, 1, 0] = per_rank[:, 7]
    gq[order, 1, 1] = per_rank[:, 8]

    # Chain from screen space back to 3D attributes (vectorized, float64).
    q_full = np.zeros((n, 2, 2))
    q_full[:, 0, 0] = proj.qcov[:, 0]
    q_full[:, 0, 1] = proj.qcov[:, 1]
    q_full[:, 1, 0] = proj.qcov[:, 1]
    q_full[:, 1, 1] = proj.qcov[:, 2]
    grad_cov2d = -np.einsum("nab,nbc,ncd->nad", q_full, gq, q_full)

    J = proj.jproj
    grad_cov_cam = np.einsum("nba,nbc,ncd->nad", J, grad_cov2d, J)
    grad_J = 2.0 * np.einsum("nab,nbc->nac", grad_cov2d, np.einsum("nab,nbc->nac", J, proj.cov_cam))
    rot_w = cam.rotation
    grad_cov_w = np.einsum("ba,nbc,cd->nad", rot_w, grad_cov_cam, rot_w)

    R = proj.rot_mat
    s2 = proj.scale2
    grad_R = 2.0 * np.einsum("nab,nbc,nc->nac", grad_cov_w, R, s2)
    grad_s2 = np.einsum("nba,nbc,nca->na", R, grad_cov_w, R)
    grad_log_scale = grad_s2 * 2.0 * s2

    jac_R = quat_to_mat_jacobian(g.rotation.astype(np.float64)
                                 / np.linalg.norm(g.rotation.astype(np.float64), axis=1, keepdims=True))
    grad_qhat = np.einsum("nab,nabk->nk", grad_R, jac_R)
    jac_norm = normalize_jacobian(g.rotation.astype(np.float64))
    grad_quat = np.einsum("nkj,nk->nj", jac_norm, grad_qhat)

    # Projection mean path plus the Jacobian's own dependence on t.
    t = proj.t_cam
    tz = np.where(proj.valid, t[:, 2], 1.0)
    grad_t = np.einsum("nij,ni->nj", J, gm)
    grad_t[:, 0] += grad_J[:, 0, 2] * (-cam.fx / tz**2)
    grad_t[:, 1] += grad_J[:, 1, 2] * (-cam.fy / tz**2)
    grad_t[:, 2] += (grad_J[:, 0, 0] * (-cam.fx / tz**2)
                     + grad_J[:, 1, 1] * (-cam.fy / tz**2)
                     + grad_J[:, 0, 2] * (2.0 * cam.fx * t[:, 0] / tz**3)
                     + grad_J[:, 1, 2] * (2.0 * cam.fy * t[:, 1] / tz**3))
    grad_pos = grad_t @ rot_w

    grad_opacity_logit = g_alpha_raw * proj.opacity * (1.0 - proj.opacity)

    dead = ~proj.valid
    for arr in (grad_pos, grad_quat, grad_log_scale, gc):
        arr[dead] = 0.0
    grad_opacity_logit[dead] = 0.0
    return RenderGrads(position=grad_pos, rotation=grad_quat,
                       log_scale=grad_log_scale, opacity_logit=grad_opacity_logit,
                       color=gc)
