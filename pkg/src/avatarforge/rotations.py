"""Quaternion and rotation-matrix helpers shared across the engine.

Quaternions are stored as (w, x, y, z). All functions broadcast over
leading batch dimensions and preserve the input dtype.
"""
from __future__ import annotations

import numpy as np

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def normalize_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float) if not isinstance(q, np.ndarray) else q
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-30):
        raise ValueError("cannot normalize a zero quaternion")
    return q / norm


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a ⊗ b, batched."""
    aw, ax, ay, az = (a[..., i] for i in range(4))
    bw, bx, by, bz = (b[..., i] for i in range(4))
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_mat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from a unit quaternion, shape [..., 3, 3]."""
    w, x, y, z = (q[..., i] for i in range(4))
    m = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def mat_to_quat(m: np.ndarray) -> np.ndarray:
    """Unit quaternion (w >= 0) from rotation matrices, shape [..., 4].

    Uses the branch-stable variant that picks the largest diagonal pivot,
    so results are deterministic and well-conditioned for every rotation.
    """
    m = np.asarray(m)
    batch = m.shape[:-2]
    mm = m.reshape((-1, 3, 3))
    n = mm.shape[0]
    q = np.empty((n, 4), dtype=m.dtype)

    t = np.einsum("nii->n", mm)
    d0, d1, d2 = mm[:, 0, 0], mm[:, 1, 1], mm[:, 2, 2]
    # candidate = argmax(trace, m00, m11, m22); split into the four branches
    cand = np.stack([t, d0, d1, d2], axis=1)
    branch = np.argmax(cand, axis=1)

    iw = branch == 0
    if iw.any():
        s = np.sqrt(t[iw] + 1.0) * 2.0
        q[iw, 0] = 0.25 * s
        q[iw, 1] = (mm[iw, 2, 1] - mm[iw, 1, 2]) / s
        q[iw, 2] = (mm[iw, 0, 2] - mm[iw, 2, 0]) / s
        q[iw, 3] = (mm[iw, 1, 0] - mm[iw, 0, 1]) / s
    ix = branch == 1
    if ix.any():
        s = np.sqrt(1.0 + d0[ix] - d1[ix] - d2[ix]) * 2.0
        q[ix, 0] = (mm[ix, 2, 1] - mm[ix, 1, 2]) / s
        q[ix, 1] = 0.25 * s
        q[ix, 2] = (mm[ix, 0, 1] + mm[ix, 1, 0]) / s
        q[ix, 3] = (mm[ix, 0, 2] + mm[ix, 2, 0]) / s
    iy = branch == 2
    if iy.any():
        s = np.sqrt(1.0 + d1[iy] - d0[iy] - d2[iy]) * 2.0
        q[iy, 0] = (mm[iy, 0, 2] - mm[iy, 2, 0]) / s
        q[iy, 1] = (mm[iy, 0, 1] + mm[iy, 1, 0]) / s
        q[iy, 2] = 0.25 * s
        q[iy, 3] = (mm[iy, 1, 2] + mm[iy, 2, 1]) / s
    iz = branch == 3
    if iz.any():
        s = np.sqrt(1.0 + d2[iz] - d0[iz] - d1[iz]) * 2.0
        q[iz, 0] = (mm[iz, 1, 0] - mm[iz, 0, 1]) / s
        q[iz, 1] = (mm[iz, 0, 2] + mm[iz, 2, 0]) / s
        q[iz, 2] = (mm[iz, 1, 2] + mm[iz, 2, 1]) / s
        q[iz, 3] = 0.25 * s

    # canonical sign: w >= 0
    flip = q[:, 0] < 0
    q[flip] *= -1.0
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q.reshape(batch + (4,))


def quat_exp(v: np.ndarray) -> np.ndarray:
    """Exponential map: rotation vector (axis * angle) -> unit quaternion."""
    v = np.asarray(v)
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * theta
    small = theta < 1e-8
    # sin(theta/2)/theta with series fallback near zero
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(small, 0.5 - theta * theta / 48.0, np.sin(half) / np.where(small, 1.0, theta))
    w = np.cos(half)
    return np.concatenate([w, v * s], axis=-1)


def quat_exp_jacobian(v: np.ndarray) -> np.ndarray:
    """d quat_exp(v) / d v, shape [..., 4, 3]."""
    v = np.asarray(v)
    theta = np.linalg.norm(v, axis=-1)
    small = theta < 1e-4
    th = np.where(small, 1.0, theta)
    half = 0.5 * theta
    sin_h, cos_h = np.sin(half), np.cos(half)
    s = np.where(small, 0.5 - theta**2 / 48.0, sin_h / th)
    # d s / d theta over theta, and dw/dv = -v * sin(half)/(2 theta)
    c2 = np.where(small, -1.0 / 24.0 + theta**2 / 960.0, cos_h / (2 * th**2) - sin_h / th**3)
    dw = -0.5 * s[..., None] * v  # since sin(half)/(2 theta) = s/2
    jac = np.zeros(v.shape[:-1] + (4, 3), dtype=v.dtype)
    jac[..., 0, :] = dw
    eye = np.eye(3, dtype=v.dtype)
    jac[..., 1:, :] = s[..., None, None] * eye + c2[..., None, None] * v[..., :, None] * v[..., None, :]
    return jac


def quat_to_mat_jacobian(q: np.ndarray) -> np.ndarray:
    """d quat_to_mat(q) / d q for the polynomial formula, shape [..., 3, 3, 4].

    The formula assumes unit q; compose with `normalize_jacobian` when the
    input quaternion is unnormalized.
    """
    w, x, y, z = (q[..., i] for i in range(4))
    jac = np.zeros(q.shape[:-1] + (3, 3, 4), dtype=q.dtype)
    zero = np.zeros_like(w)
    # rows of R listed with per-component derivatives (w, x, y, z)
    jac[..., 0, 0, :] = np.stack([zero, zero, -4 * y, -4 * z], axis=-1)
    jac[..., 0, 1, :] = np.stack([-2 * z, 2 * y, 2 * x, -2 * w], axis=-1)
    jac[..., 0, 2, :] = np.stack([2 * y, 2 * z, 2 * w, 2 * x], axis=-1)
    jac[..., 1, 0, :] = np.stack([2 * z, 2 * y, 2 * x, 2 * w], axis=-1)
    jac[..., 1, 1, :] = np.stack([zero, -4 * x, zero, -4 * z], axis=-1)
    jac[..., 1, 2, :] = np.stack([-2 * x, -2 * w, 2 * z, 2 * y], axis=-1)
    jac[..., 2, 0, :] = np.stack([-2 * y, 2 * z, -2 * w, 2 * x], axis=-1)
    jac[..., 2, 1, :] = np.stack([2 * x, 2 * w, 2 * z, 2 * y], axis=-1)
    jac[..., 2, 2, :] = np.stack([zero, -4 * x, -4 * y, zero], axis=-1)
    return jac


def normalize_jacobian(q: np.ndarray) -> np.ndarray:
    """d (q/|q|) / d q, shape [..., 4, 4]."""
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qh = q / norm
    eye = np.eye(4, dtype=q.dtype)
    return (eye - qh[..., :, None] * qh[..., None, :]) / norm[..., None]


def polar_rotation(m: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar factor) of [..., 3, 3] matrices.

    Uses SVD with a determinant fix so the result is always in SO(3).
    """
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    det = np.linalg.det(r)
    # flip the last singular direction when the product lands in O(3)\SO(3)
    flip = det < 0
    if np.any(flip):
        u = u.copy()
        u[flip, :, 2] *= -1.0
        r = u @ vt
    return r
