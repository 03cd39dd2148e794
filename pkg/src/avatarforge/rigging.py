"""Animation machinery for the hybrid avatar.

LBS weight initialization with geometry-aware KNN smoothing, articulation of
unconstrained Gaussians by blended per-joint rigid maps, mesh-binding Gaussian
placement that rides on body-part triangles, reversible shape edits, and the
pose-corrective deformation network.

Rotation blending uses the polar projection of the weight-blended linear part,
which reduces to the exact rigid rotation when the weights are one-hot.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .body import BodyTemplate, LbsResult, Pose, lbs_transform
from .field import frequency_encode, frequency_encode_grad
from .gaussians import GaussianSet, HybridAvatar
from .mlp import MLP
from .rotations import (mat_to_quat, normalize_jacobian, normalize_quat,
                        polar_rotation, quat_exp, quat_exp_jacobian, quat_mul)

# Barycentric placement sites per triangle: the centroid for a single
# Gaussian, the midpoints of the three median segments for three.
_BARY_SITES = {
    1: np.array([[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]]),
    3: np.array([[0.50, 0.25, 0.25], [0.25, 0.50, 0.25], [0.25, 0.25, 0.50]]),
}
_TANGENT_SCALE = 0.5  # in units of sqrt(triangle area)
_NORMAL_SCALE = 0.05
_DEGENERATE_AREA = 1e-12


@dataclass
class KnnSmoothingConfig:
    """Settings for the geometry-aware blend-weight smoothing iteration."""

    k_neighbors: int = 16
    iterations: int = 10
    distance_epsilon: float = 1e-8  # floor for squared distances

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.distance_epsilon > 0:
            raise ValueError("distance_epsilon must be > 0")


def nearest_vertex_index(positions: np.ndarray, vertices: np.ndarray,
                         chunk: int = 4096) -> np.ndarray:
    """Index of the Euclidean-nearest vertex per query point. [N]

    Ties break to the lowest vertex index. Chunked exhaustive scan: exact,
    deterministic, and memory-bounded.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    if vertices.shape[0] == 0:
        raise ValueError("vertex set is empty")
    out = np.empty(positions.shape[0], dtype=np.int64)
    for start in range(0, positions.shape[0], chunk):
        d2 = cdist(positions[start:start + chunk], vertices, "sqeuclidean")
        out[start:start + chunk] = np.argmin(d2, axis=1)  # first min = lowest index
    return out


def init_lbs_weights(positions: np.ndarray, template: BodyTemplate,
                     canonical_vertices: np.ndarray) -> np.ndarray:
    """Seed blend weights by copying the nearest canonical vertex's row. [N, N_j]"""
    canonical_vertices = np.asarray(canonical_vertices, dtype=np.float64).reshape(-1, 3)
    if canonical_vertices.shape[0] == 0:
        raise ValueError("template has no vertices")
    if canonical_vertices.shape[0] != template.n_vertices:
        raise ValueError("canonical_vertices rows must match the template's vertices")
    idx = nearest_vertex_index(positions, canonical_vertices)
    return template.skin_weights.astype(np.float64)[idx]


def knn_smooth_lbs(weights: np.ndarray, positions: np.ndarray,
                   template: BodyTemplate, canonical_vertices: np.ndarray,
                   cfg: KnnSmoothingConfig) -> np.ndarray:
    """Smooth blend weights over the K nearest Gaussians, geometry-aware.

    Each iteration replaces every row by a convex combination of its
    neighbors' rows (self included). Neighbor k contributes proportionally
    to 1 / (d_ng_k * d_nv_k): the squared distance to the neighbor and the
    neighbor's squared distance to its nearest template vertex, both floored
    at ``distance_epsilon`` before inversion, so coincident points stay
    finite and the self term dominates. Updates are synchronous, so the
    result does not depend on row order.
    """
    weights = np.asarray(weights, dtype=np.float64).reshape(len(weights), -1).copy()
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = positions.shape[0]
    if weights.shape != (n, template.n_joints):
        raise ValueError("weights must be [N, N_joints] aligned with positions")
    if n and np.abs(weights.sum(axis=1) - 1.0).max() > 1e-6:
        raise ValueError("weight rows must sum to 1")
    if cfg.iterations == 0 or n == 0:
        return weights
    canonical_vertices = np.asarray(canonical_vertices, dtype=np.float64).reshape(-1, 3)

    d_vert = cKDTree(canonical_vertices).query(positions)[0]  # [N]
    d_nv = np.maximum(d_vert**2, cfg.distance_epsilon)
    k = min(cfg.k_neighbors, n)
    d_g, idx = cKDTree(positions).query(positions, k=k)
    if k == 1:
        d_g, idx = d_g[:, None], idx[:, None]
    agg = 1.0 / (np.maximum(d_g**2, cfg.distance_epsilon) * d_nv[idx])  # [N, K]
    agg /= agg.sum(axis=1, keepdims=True)
    for _ in range(cfg.iterations):
        weights = np.einsum("nk,nkj->nj", agg, weights[idx])
    return weights


# ---------------------------------------------------------------------------
# Mesh-binding placement


@dataclass
class MeshBinding:
    """Gaussian placements riding on mesh triangles.

    ``face`` indexes whatever face array the binding was built against;
    ``skipped`` counts degenerate (zero-area) triangles that were dropped.
    """

    face: np.ndarray  # [M]
    bary: np.ndarray  # [M, 3]
    position: np.ndarray  # [M, 3]
    rotation: np.ndarray  # [M, 4]
    log_scale: np.ndarray  # [M, 3]
    skipped: int = 0

    def __len__(self) -> int:
        return self.face.shape[0]


def _triangle_frames(tri: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Orthonormal frame, area, and degeneracy mask per triangle.

    Frame columns are (unit edge v0->v1, normal x edge, normal), so local z
    is the triangle normal; det is +1 by construction. Norms are floored to
    keep articulation NaN-free even if a pose crushes a triangle.
    """
    tri = np.asarray(tri, dtype=np.float64)
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    n_raw = np.cross(e1, e2)
    two_area = np.linalg.norm(n_raw, axis=1)
    len1 = np.linalg.norm(e1, axis=1)
    area = 0.5 * two_area
    degenerate = (area <= _DEGENERATE_AREA) | (len1 <= _DEGENERATE_AREA)
    ex = e1 / np.maximum(len1, _DEGENERATE_AREA)[:, None]
    nz = n_raw / np.maximum(two_area, _DEGENERATE_AREA)[:, None]
    ey = np.cross(nz, ex)
    frames = np.stack([ex, ey, nz], axis=-1)  # [M, 3, 3] columns
    return frames, area, degenerate


def _binding_scales(area: np.ndarray) -> np.ndarray:
    root = np.sqrt(np.maximum(area, _DEGENERATE_AREA))
    return np.log(np.stack([_TANGENT_SCALE * root, _TANGENT_SCALE * root,
                            _NORMAL_SCALE * root], axis=1))


def bind_triangles(vertices: np.ndarray, faces: np.ndarray,
                   gaussians_per_triangle: int) -> MeshBinding:
    """Place Gaussians at fixed barycentric sites of each triangle.

    One Gaussian sits at the centroid; three sit at the midpoints of the
    median segments. Frames align local z with the triangle normal;
    tangential scales are 0.5*sqrt(area), the normal scale 0.05*sqrt(area).
    Zero-area triangles are skipped and counted.
    """
    if gaussians_per_triangle not in _BARY_SITES:
        raise ValueError(f"unsupported gaussians_per_triangle {gaussians_per_triangle};"
                         f" choose one of {sorted(_BARY_SITES)}")
    sites = _BARY_SITES[gaussians_per_triangle]  # [K, 3]
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    tri = vertices[faces]  # [F, 3, 3]
    frames, area, degenerate = _triangle_frames(tri)
    keep = np.nonzero(~degenerate)[0]
    k = sites.shape[0]
    face_idx = np.repeat(keep, k)
    bary = np.tile(sites, (keep.shape[0], 1))
    position = np.einsum("mk,mkd->md", bary, tri[face_idx])
    rotation = np.repeat(mat_to_quat(frames[keep]), k, axis=0)
    log_scale = np.repeat(_binding_scales(area[keep]), k, axis=0)
    return MeshBinding(face=face_idx, bary=bary, position=position,
                       rotation=rotation, log_scale=log_scale,
                       skipped=int(degenerate.sum()))


def bind_to_mesh(template: BodyTemplate, part: str, gaussians_per_triangle: int,
                 canonical_vertices: np.ndarray) -> MeshBinding:
    """Bind Gaussians to every triangle of a named body part.

    Returned ``face`` indices are global template triangle ids, so the
    binding survives into articulate and serialization unchanged.
    """
    if part not in template.part_labels:
        raise ValueError(f"template has no part named '{part}'; "
                         f"available: {sorted(template.part_labels)}")
    face_ids = np.asarray(template.part_labels[part], dtype=np.int64)
    binding = bind_triangles(canonical_vertices, template.faces[face_ids],
                             gaussians_per_triangle)
    binding.face = face_ids[binding.face]
    return binding


# ---------------------------------------------------------------------------
# Pose-corrective deformation network


@dataclass
class DeformCache:
    mlp_cache: tuple
    tanh_raw: np.ndarray  # [N, 9] float64
    unit: np.ndarray  # [N, 3] float64 normalized positions


class DeformNet:
    """Pose-corrective offsets for unconstrained Gaussians.

    Maps (frequency-encoded canonical position, flattened joint-rotation
    vector) to per-Gaussian corrections (delta position, delta log-scale,
    delta rotation as an exp-map 3-vector), each tanh-bounded by
    ``output_scale``. The pose vector deliberately excludes the global rigid
    transform so corrections commute with global motion. The head is
    zero-initialized: a fresh network is an exact no-op.
    """

    def __init__(self, bounds, n_joints: int, n_bands: int = 4,
                 hidden: tuple = (64, 64), output_scale: float = 0.05,
                 seed: int = 0, dtype=np.float32):
        lo, hi = bounds
        self.lo = np.asarray(lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(hi, dtype=np.float64).reshape(3)
        if np.any(self.hi <= self.lo):
            raise ValueError("bounds must satisfy hi > lo per axis")
        if not output_scale > 0:
            raise ValueError("output_scale must be > 0")
        self.n_joints = int(n_joints)
        self.n_bands = int(n_bands)
        self.hidden = tuple(int(h) for h in hidden)
        self.output_scale = float(output_scale)
        self.n_features = 3 + 6 * self.n_bands
        self.mlp = MLP((self.n_features + 4 * self.n_joints, *self.hidden, 9),
                       seed=seed, dtype=dtype, zero_last=True)

    @classmethod
    def for_template(cls, template: BodyTemplate, pad: float = 0.1, **kwargs):
        """Network whose box is the template's rest bounds padded by `pad`."""
        lo, hi = template.bounds()
        c = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo) * (1.0 + pad)
        return cls((c - half, c + half), template.n_joints, **kwargs)

    @property
    def params(self) -> np.ndarray:
        return self.mlp.params

    @property
    def n_params(self) -> int:
        return self.mlp.n_params

    def pose_vector(self, pose: Pose) -> np.ndarray:
        """Flattened joint-rotation quaternions; global rigid excluded. [4*N_j]"""
        q = np.asarray(pose.joint_rotations, dtype=np.float64)
        if q.shape != (self.n_joints, 4):
            raise ValueError(f"pose has {q.shape[0]} joints, network expects {self.n_joints}")
        return q.reshape(-1)

    def _unit(self, positions: np.ndarray) -> np.ndarray:
        p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        return (p - self.lo) / (self.hi - self.lo) * 2.0 - 1.0

    def forward(self, positions: np.ndarray, pose: Pose, need_cache: bool = False):
        """Corrections (dp, ds, dq) per position, each [N, 3]."""
        unit = self._unit(positions)
        feats = frequency_encode(unit, self.n_bands)
        xi = self.pose_vector(pose)
        x = np.concatenate([feats, np.broadcast_to(xi, (feats.shape[0], xi.shape[0]))],
                           axis=1).astype(self.mlp.dtype)
        if need_cache:
            raw, mlp_cache = self.mlp.forward(x, need_cache=True)
        else:
            raw = self.mlp.forward(x)
        th = np.tanh(raw.astype(np.float64))
        out = self.output_scale * th
        dp, ds, dq = out[:, 0:3], out[:, 3:6], out[:, 6:9]
        if need_cache:
            return (dp, ds, dq), DeformCache(mlp_cache, th, unit)
        return dp, ds, dq

    def backward(self, cache: DeformCache, grad_dp: np.ndarray, grad_ds: np.ndarray,
                 grad_dq: np.ndarray, with_grad_positions: bool = False):
        """Chain correction gradients to (flat parameter grads, position grads)."""
        g_out = np.concatenate([grad_dp, grad_ds, grad_dq], axis=1)
        g_raw = g_out * self.output_scale * (1.0 - cache.tanh_raw**2)
        g_params, g_x = self.mlp.backward(cache.mlp_cache, g_raw.astype(self.mlp.dtype),
                                          with_grad_x=with_grad_positions)
        g_positions = None
        if with_grad_positions:
            g_feats = g_x[:, :self.n_features].astype(np.float64)
            g_unit = frequency_encode_grad(cache.unit, self.n_bands, g_feats)
            g_positions = g_unit * (2.0 / (self.hi - self.lo))
        return g_params.astype(np.float64), g_positions

    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        """(JSON-safe metadata, arrays) pair for checkpoint embedding."""
        meta = {"kind": "nr_deform", "n_joints": self.n_joints,
                "n_bands": self.n_bands, "hidden": list(self.hidden),
                "output_scale": self.output_scale,
                "bounds": [self.lo.tolist(), self.hi.tolist()],
                "dtype": np.dtype(self.mlp.dtype).name}
        return meta, {"params": self.params.copy()}

    @classmethod
    def from_state(cls, meta: dict, arrays: dict[str, np.ndarray]) -> "DeformNet":
        net = cls(tuple(np.asarray(b) for b in meta["bounds"]), meta["n_joints"],
                  n_bands=meta["n_bands"], hidden=tuple(meta["hidden"]),
                  output_scale=meta["output_scale"], dtype=np.dtype(meta["dtype"]))
        params = np.asarray(arrays["params"], dtype=net.mlp.dtype).reshape(-1)
        if params.shape != net.params.shape:
            raise ValueError("deform checkpoint parameter count mismatch")
        net.params[:] = params
        return net


def attach_deform(avatar: HybridAvatar, deform: DeformNet) -> None:
    """Embed the network in the avatar so it rides along in checkpoints."""
    meta, arrays = deform.state()
    avatar.deform_meta = meta
    avatar.deform_arrays = arrays


def deform_from_avatar(avatar: HybridAvatar) -> DeformNet | None:
    """Reconstruct an embedded network, or None when the avatar has none."""
    if avatar.deform_meta is None:
        return None
    return DeformNet.from_state(avatar.deform_meta, avatar.deform_arrays)


# ---------------------------------------------------------------------------
# Articulation


def effective_pose(avatar: HybridAvatar, template: BodyTemplate, pose: Pose) -> Pose:
    """Pose whose shape/expression coefficients include the avatar's own."""
    n_basis = template.shape_basis.shape[2]
    n_body = template.n_shape
    coeffs = np.zeros(n_basis)
    coeffs[:pose.shape.shape[0]] += pose.shape
    if pose.expression.shape[0]:
        coeffs[n_body:n_body + pose.expression.shape[0]] += pose.expression
    if avatar.part_shape.size:
        if avatar.part_shape.shape[0] != n_basis:
            raise ValueError("avatar part_shape length does not match the template basis")
        coeffs += avatar.part_shape.astype(np.float64)
    eff = pose.copy()
    eff.shape = coeffs[:n_body]
    eff.expression = coeffs[n_body:]
    return eff


def _quat_left_mat(a: np.ndarray) -> np.ndarray:
    """L(a) with quat_mul(a, b) = L(a) @ b. [..., 4, 4]"""
    w, x, y, z = (a[..., i] for i in range(4))
    rows = [np.stack([w, -x, -y, -z], axis=-1),
            np.stack([x, w, -z, y], axis=-1),
            np.stack([y, z, w, -x], axis=-1),
            np.stack([z, -y, x, w], axis=-1)]
    return np.stack(rows, axis=-2)


def _quat_right_mat(b: np.ndarray) -> np.ndarray:
    """R(b) with quat_mul(a, b) = R(b) @ a. [..., 4, 4]"""
    w, x, y, z = (b[..., i] for i in range(4))
    rows = [np.stack([w, -x, -y, -z], axis=-1),
            np.stack([x, w, z, -y], axis=-1),
            np.stack([y, -z, w, x], axis=-1),
            np.stack([z, y, -x, w], axis=-1)]
    return np.stack(rows, axis=-2)


@dataclass
class ArticulateCache:
    """Forward intermediates needed to push render gradients back."""

    avatar: HybridAvatar
    template: BodyTemplate
    deform: DeformNet | None
    lbs: LbsResult
    u_idx: np.ndarray
    b_idx: np.ndarray
    weights: np.ndarray | None  # [N_u, N_j] float64
    blend_rot: np.ndarray | None  # [N_u, 3, 3]
    q_rigid: np.ndarray | None  # [N_u, 4] polar-projected blend rotation
    q_raw: np.ndarray | None  # [N_u, 4] stored quaternions
    q_canon: np.ndarray | None  # [N_u, 4] normalized (and deformed) quaternions
    exp_dq: np.ndarray | None  # [N_u, 4]
    delta_q: np.ndarray | None  # [N_u, 3]
    deform_cache: DeformCache | None
    faces: np.ndarray | None  # [N_m, 3] vertex ids
    bary: np.ndarray | None  # [N_m, 3] float64


@dataclass
class ArticulateGrads:
    """Gradients w.r.t. canonical avatar parameters.

    Bound members' position/rotation/scale rows are zero: those values are
    recomputed from the mesh, so their stored parameters are not free.
    Color and opacity gradients pass through articulation unchanged and are
    not routed here.
    """

    position: np.ndarray  # [N, 3]
    rotation: np.ndarray  # [N, 4]
    log_scale: np.ndarray  # [N, 3]
    part_shape: np.ndarray  # [N_b]
    deform_params: np.ndarray | None


def articulate(avatar: HybridAvatar, template: BodyTemplate, pose: Pose,
               deform: DeformNet | None = None, need_cache: bool = False):
    """Pose the avatar: skin unconstrained members, re-seat bound members.

    Unconstrained Gaussians optionally receive canonical-space corrections,
    then follow the blended per-joint rigid maps: positions transform
    affinely, rotations compose with the polar projection of the blended
    linear part, scales pass through. Bound Gaussians are recomputed from
    their posed triangles, so their centers stay on the (offset-0) triangle
    planes in every pose. Order-preserving; colors and opacities unchanged.
    """
    gauss = avatar.gaussians
    u_idx = avatar.unconstrained_index
    b_idx = avatar.bound_index
    if u_idx.size and avatar.lbs_weights.shape[1] != template.n_joints:
        raise ValueError("avatar lbs_weights do not match the template's joint count")
    eff = effective_pose(avatar, template, pose)
    lbs = lbs_transform(template, eff)
    out = gauss.copy()
    w = blend_rot = q_rigid = q_raw = q_c = None
    exp_dq = delta_q = deform_cache = faces = bary = None

    if u_idx.size:
        p_hat = gauss.position[u_idx].astype(np.float64)
        q_raw = gauss.rotation[u_idx].astype(np.float64)
        q_n = normalize_quat(q_raw)
        s_hat = gauss.log_scale[u_idx].astype(np.float64)
        if deform is not None:
            if need_cache:
                (dp, ds, dq), deform_cache = deform.forward(p_hat, pose, need_cache=True)
            else:
                dp, ds, dq = deform.forward(p_hat, pose)
            exp_dq = quat_exp(dq)
            delta_q = dq
            p_c = p_hat + dp
            s_c = s_hat + ds
            q_c = quat_mul(exp_dq, q_n)
        else:
            p_c, s_c, q_c = p_hat, s_hat, q_n
        w = avatar.lbs_weights.astype(np.float64)
        blend_rot = np.einsum("nj,jab->nab", w, lbs.joint_rotations)
        position = np.einsum("nab,nb->na", blend_rot, p_c) + w @ lbs.joint_translations
        q_rigid = mat_to_quat(polar_rotation(blend_rot))
        out.position[u_idx] = position
        out.rotation[u_idx] = quat_mul(q_rigid, q_c)
        out.log_scale[u_idx] = s_c

    if b_idx.size:
        faces = template.faces[avatar.binding_face.astype(np.int64)]  # [N_m, 3]
        tri = lbs.vertices[faces]
        bary = avatar.binding_bary.astype(np.float64)
        frames, area, _ = _triangle_frames(tri)
        position = np.einsum("mk,mkd->md", bary, tri)
        position += avatar.binding_offset.astype(np.float64)[:, None] * frames[:, :, 2]
        out.position[b_idx] = position
        out.rotation[b_idx] = mat_to_quat(frames)
        out.log_scale[b_idx] = _binding_scales(area)

    if need_cache:
        return out, ArticulateCache(avatar, template, deform, lbs, u_idx, b_idx,
                                    w, blend_rot, q_rigid, q_raw, q_c, exp_dq,
                                    delta_q, deform_cache, faces, bary)
    return out


def articulate_backward(cache: ArticulateCache, grad_position: np.ndarray,
                        grad_rotation: np.ndarray,
                        grad_log_scale: np.ndarray) -> ArticulateGrads:
    """Push posed-set gradients back to canonical parameters.

    Covers stored position/rotation/log-scale of unconstrained members, the
    deformation network, and the shape coefficients via bound-member
    positions. Joint transforms are treated as constant with respect to the
    shape coefficients, and bound frames/scales as constant too: the blend
    weights and the pose are not optimized, so only the direct vertex path
    carries useful signal.
    """
    avatar, template = cache.avatar, cache.template
    n = len(avatar.gaussians)
    g_pos = np.zeros((n, 3))
    g_rot = np.zeros((n, 4))
    g_ls = np.zeros((n, 3))
    n_basis = template.shape_basis.shape[2]
    g_shape = np.zeros(n_basis)
    g_deform = None

    u_idx = cache.u_idx
    if u_idx.size:
        gp = np.asarray(grad_position, dtype=np.float64)[u_idx]
        gr = np.asarray(grad_rotation, dtype=np.float64)[u_idx]
        gs = np.asarray(grad_log_scale, dtype=np.float64)[u_idx]
        g_pc = np.einsum("nba,nb->na", cache.blend_rot, gp)  # M^T g
        g_qc = np.einsum("nij,ni->nj", _quat_left_mat(cache.q_rigid), gr)
        g_sc = gs
        if cache.deform is not None:
            q_n = normalize_quat(cache.q_raw)
            g_qn = np.einsum("nij,ni->nj", _quat_left_mat(cache.exp_dq), g_qc)
            g_e = np.einsum("nij,ni->nj", _quat_right_mat(q_n), g_qc)
            g_dq = np.einsum("nij,ni->nj", quat_exp_jacobian(cache.delta_q), g_e)
            g_params, g_pin = cache.deform.backward(cache.deform_cache, g_pc, g_sc,
                                                    g_dq, with_grad_positions=True)
            g_phat = g_pc + g_pin
            g_deform = g_params
        else:
            g_qn = g_qc
            g_phat = g_pc
        g_pos[u_idx] = g_phat
        g_rot[u_idx] = np.einsum("nij,ni->nj", normalize_jacobian(cache.q_raw), g_qn)
        g_ls[u_idx] = g_sc

    b_idx = cache.b_idx
    if b_idx.size and n_basis:
        gp = np.asarray(grad_position, dtype=np.float64)[b_idx]  # [N_m, 3]
        verts_used, inverse = np.unique(cache.faces, return_inverse=True)
        blend_rot = np.einsum("vj,jab->vab",
                              template.skin_weights.astype(np.float64)[verts_used],
                              cache.lbs.joint_rotations)
        basis = template.shape_basis.astype(np.float64)[verts_used]  # [V, 3, N_b]
        rot_basis = np.einsum("vab,vbk->vak", blend_rot, basis)  # [V, 3, N_b]
        gathered = rot_basis[inverse.reshape(cache.faces.shape)]  # [N_m, 3, 3, N_b]
        g_shape = np.einsum("ma,mk,mkab->b", gp, cache.bary, gathered)

    return ArticulateGrads(g_pos, g_rot, g_ls, g_shape, g_deform)


# ---------------------------------------------------------------------------
# Shape editing


def apply_shape_edit(avatar: HybridAvatar, template: BodyTemplate,
                     delta_shape: np.ndarray) -> HybridAvatar:
    """Shift the avatar along the template's shape basis; reversible.

    Unconstrained members move by the basis displacement of their anchor
    vertex (cached on first edit, so applying -delta restores the original
    positions); bound members are re-seated on the re-shaped canonical mesh;
    the stored shape coefficients absorb the delta.
    """
    delta = np.asarray(delta_shape, dtype=np.float64).reshape(-1)
    n_basis = template.shape_basis.shape[2]
    if delta.shape[0] != n_basis:
        raise ValueError(f"delta_shape has {delta.shape[0]} coefficients, "
                         f"template basis has {n_basis}")
    out = avatar.copy()
    if not np.any(delta):
        return out
    if avatar.part_shape.size and avatar.part_shape.shape[0] != n_basis:
        raise ValueError("avatar part_shape length does not match the template basis")
    coeffs_old = (avatar.part_shape.astype(np.float64) if avatar.part_shape.size
                  else np.zeros(n_basis))
    basis = template.shape_basis.astype(np.float64)
    rest = template.vertices_rest.astype(np.float64)

    u_idx = avatar.unconstrained_index
    if u_idx.size:
        anchors = avatar.anchor_vertices
        if anchors is None:
            verts_old = rest + basis @ coeffs_old
            anchors = nearest_vertex_index(avatar.gaussians.position[u_idx], verts_old)
        displacement = np.einsum("nak,k->na", basis[anchors], delta)
        out.gaussians.position[u_idx] = (
            avatar.gaussians.position[u_idx].astype(np.float64) + displacement)
        out.anchor_vertices = np.ascontiguousarray(anchors, dtype=np.int32)

    coeffs_new = coeffs_old + delta
    out.part_shape = coeffs_new.astype(np.float32)

    b_idx = avatar.bound_index
    if b_idx.size:
        verts_new = rest + basis @ coeffs_new
        faces = template.faces[avatar.binding_face.astype(np.int64)]
        tri = verts_new[faces]
        frames, area, _ = _triangle_frames(tri)
        bary = avatar.binding_bary.astype(np.float64)
        position = np.einsum("mk,mkd->md", bary, tri)
        position += avatar.binding_offset.astype(np.float64)[:, None] * frames[:, :, 2]
        out.gaussians.position[b_idx] = position
        out.gaussians.rotation[b_idx] = mat_to_quat(frames)
        out.gaussians.log_scale[b_idx] = _binding_scales(area)
    return out
