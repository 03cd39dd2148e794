"""Procedural capsule mannequin used as the stand-in body template.

Builds a 12-joint articulated figure out of capsule meshes, with banded
skin weights, a nearest-vertex joint regressor, two body shape directions
(overall scale, limb thickness), two expression directions (nose length,
jaw width), facial keypoints, and a smooth tri-color vertex texture.
The rest geometry is an A pose (arms angled 40 degrees down).
"""
from __future__ import annotations

import numpy as np

from .body import BodyTemplate, Keypoint, Pose
from .rotations import quat_exp

PELVIS, SPINE, NECK, HEAD = 0, 1, 2, 3
L_SHOULDER, L_ELBOW, R_SHOULDER, R_ELBOW = 4, 5, 6, 7
L_HIP, L_KNEE, R_HIP, R_KNEE = 8, 9, 10, 11

JOINT_NAMES = [
    "pelvis", "spine", "neck", "head",
    "l_shoulder", "l_elbow", "r_shoulder", "r_elbow",
    "l_hip", "l_knee", "r_hip", "r_knee",
]
PARENTS = np.array([-1, 0, 1, 2, 1, 4, 1, 6, 0, 8, 0, 10], dtype=np.int32)

_ARM_DIR_L = np.array([np.cos(np.deg2rad(40.0)), -np.sin(np.deg2rad(40.0)), 0.0])

_JOINT_POS = {
    "pelvis": (0.0, 0.0, 0.0),
    "spine": (0.0, 0.25, 0.0),
    "neck": (0.0, 0.52, 0.0),
    "head": (0.0, 0.62, 0.0),
    "l_shoulder": (0.17, 0.46, 0.0),
    "r_shoulder": (-0.17, 0.46, 0.0),
    "l_hip": (0.10, -0.04, 0.0),
    "l_knee": (0.11, -0.42, 0.0),
    "r_hip": (-0.10, -0.04, 0.0),
    "r_knee": (-0.11, -0.42, 0.0),
}


def _designed_joints() -> np.ndarray:
    pos = dict(_JOINT_POS)
    for side, sign in (("l", 1.0), ("r", -1.0)):
        sh = np.asarray(pos[f"{side}_shoulder"])
        d = _ARM_DIR_L * np.array([sign, 1.0, 1.0])
        pos[f"{side}_elbow"] = tuple(sh + 0.26 * d)
    return np.array([pos[n] for n in JOINT_NAMES])


def _frame(zhat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ref = np.array([1.0, 0.0, 0.0]) if abs(zhat[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(ref, zhat)
    x /= np.linalg.norm(x)
    return x, np.cross(zhat, x)


def _capsule(p0, p1, radius: float, n_seg: int, n_len: int, n_cap: int):
    """Capsule mesh between two points. Returns (verts, faces, axis_u, axis_point)."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    axis = p1 - p0
    length = np.linalg.norm(axis)
    zhat = axis / length
    xhat, yhat = _frame(zhat)

    rows = []  # (ring center, ring radius)
    for k in range(1, n_cap):
        psi = -0.5 * np.pi + 0.5 * np.pi * k / n_cap
        rows.append((p0 + np.sin(psi) * radius * zhat, np.cos(psi) * radius))
    for i in range(n_len + 1):
        rows.append((p0 + (i / n_len) * axis, radius))
    for k in range(1, n_cap):
        psi = 0.5 * np.pi * k / n_cap
        rows.append((p1 + np.sin(psi) * radius * zhat, np.cos(psi) * radius))

    theta = 2.0 * np.pi * np.arange(n_seg) / n_seg
    ring_dirs = np.outer(np.cos(theta), xhat) + np.outer(np.sin(theta), yhat)  # [n_seg, 3]
    verts = [p0 - radius * zhat]
    for center, r in rows:
        verts.extend(center + r * ring_dirs)
    verts.append(p1 + radius * zhat)
    verts = np.asarray(verts)

    def ring(i, j):
        return 1 + i * n_seg + (j % n_seg)

    faces = []
    for j in range(n_seg):
        faces.append((0, ring(0, j + 1), ring(0, j)))
    for i in range(len(rows) - 1):
        for j in range(n_seg):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j + 1), ring(i + 1, j)
            faces.append((a, b, c))
            faces.append((a, c, d))
    top = len(verts) - 1
    last = len(rows) - 1
    for j in range(n_seg):
        faces.append((top, ring(last, j), ring(last, j + 1)))
    faces = np.asarray(faces, dtype=np.int64)

    # Enforce outward winding via the signed volume about the centroid.
    rel = verts - verts.mean(axis=0)
    vol = np.einsum("fi,fi->", np.cross(rel[faces[:, 0]], rel[faces[:, 1]]), rel[faces[:, 2]])
    if vol < 0:
        faces = faces[:, [0, 2, 1]]

    u = np.clip((verts - p0) @ zhat / length, 0.0, 1.0)
    axis_point = p0 + u[:, None] * axis
    return verts, faces, u, axis_point


def _torso_weights(u):
    knots = np.array([0.0, 0.55, 1.0])
    return [(PELVIS, np.interp(u, knots, [1.0, 0.0, 0.0])),
            (SPINE, np.interp(u, knots, [0.0, 1.0, 0.0])),
            (NECK, np.interp(u, knots, [0.0, 0.0, 1.0]))]


def _head_weights(u):
    w_head = np.clip(u / 0.3, 0.0, 1.0)
    return [(NECK, 1.0 - w_head), (HEAD, w_head)]


def _proximal_blend(u, parent, owner, child):
    """0.5 parent share fading out by u=0.2; 0.5 child share growing after u=0.8."""
    w_parent = 0.5 * np.clip(1.0 - u / 0.2, 0.0, 1.0)
    w_child = 0.5 * np.clip((u - 0.8) / 0.2, 0.0, 1.0)
    return [(parent, w_parent), (owner, 1.0 - w_parent - w_child), (child, w_child)]


def _distal_blend(u, parent, owner):
    w_parent = 0.5 * np.clip(1.0 - u / 0.2, 0.0, 1.0)
    return [(parent, w_parent), (owner, 1.0 - w_parent)]


def make_mannequin(seed: int = 0) -> BodyTemplate:
    """Deterministic capsule mannequin; the seed varies proportions and colors."""
    rng = np.random.default_rng(seed)
    joints = _designed_joints()

    def jp(name):
        return joints[JOINT_NAMES.index(name)]

    specs = []  # (name, p0, p1, radius, resolution, weight_fn, limb, part)
    specs.append(("torso", (0.0, -0.06, 0.0), (0.0, 0.52, 0.0), 0.14, (16, 12, 4),
                  _torso_weights, False, None))
    specs.append(("head", (0.0, 0.54, 0.0), (0.0, 0.74, 0.0), 0.105, (12, 8, 3),
                  _head_weights, False, None))
    for side, sign, sh, el in (("l", 1.0, L_SHOULDER, L_ELBOW), ("r", -1.0, R_SHOULDER, R_ELBOW)):
        d = _ARM_DIR_L * np.array([sign, 1.0, 1.0])
        shoulder = jp(f"{side}_shoulder")
        elbow = jp(f"{side}_elbow")
        wrist = elbow + 0.24 * d
        specs.append((f"upper_arm_{side}", shoulder, elbow, 0.055, (10, 6, 3),
                      lambda u, sh=sh, el=el: _proximal_blend(u, SPINE, sh, el), True, None))
        specs.append((f"forearm_{side}", elbow, wrist, 0.045, (10, 6, 3),
                      lambda u, sh=sh, el=el: _distal_blend(u, sh, el), True, None))
        specs.append((f"hand_{side}", wrist, wrist + 0.09 * d, 0.05, (8, 3, 2),
                      lambda u, el=el: [(el, np.ones_like(u))], True, f"hand_{side}"))
    for side, hip, knee in (("l", L_HIP, L_KNEE), ("r", R_HIP, R_KNEE)):
        hip_p = jp(f"{side}_hip")
        knee_p = jp(f"{side}_knee")
        ankle = knee_p + np.array([0.005 * np.sign(knee_p[0]), -0.36, 0.0])
        specs.append((f"thigh_{side}", hip_p, knee_p, 0.075, (10, 8, 3),
                      lambda u, hip=hip, knee=knee: _proximal_blend(u, PELVIS, hip, knee), True, None))
        specs.append((f"shin_{side}", knee_p, ankle, 0.055, (10, 6, 3),
                      lambda u, hip=hip, knee=knee: _distal_blend(u, hip, knee), True, None))

    verts_all, faces_all, weights_all = [], [], []
    limb_radial = []
    part_labels: dict[str, list[int]] = {"hand_l": [], "hand_r": [], "face": []}
    base_v = 0
    head_face_range = (0, 0)
    for name, p0, p1, radius, (n_seg, n_len, n_cap), weight_fn, limb, part in specs:
        radius = radius * (1.0 + 0.04 * rng.uniform(-1.0, 1.0))
        v, f, u, axis_point = _capsule(p0, p1, radius, n_seg, n_len, n_cap)
        w = np.zeros((v.shape[0], len(JOINT_NAMES)))
        for joint, wj in weight_fn(u):
            w[:, joint] += wj
        base_f = sum(len(ff) for ff in faces_all)
        if part is not None:
            part_labels[part].extend(range(base_f, base_f + len(f)))
        if name == "head":
            head_face_range = (base_f, base_f + len(f))
        verts_all.append(v)
        faces_all.append(f + base_v)
        weights_all.append(w)
        limb_radial.append(v - axis_point if limb else np.zeros_like(v))
        base_v += v.shape[0]

    verts = np.concatenate(verts_all)
    faces = np.concatenate(faces_all)
    weights = np.concatenate(weights_all)
    weights /= weights.sum(axis=1, keepdims=True)
    radial = np.concatenate(limb_radial)

    def _renormalize_f32(rows: np.ndarray) -> np.ndarray:
        # Fold float32 rounding residue into the largest entry so row sums
        # stay within 1e-6 of 1 after the cast.
        out = rows.astype(np.float32)
        resid = 1.0 - out.astype(np.float64).sum(axis=1)
        idx = np.argmax(out, axis=1)
        out[np.arange(out.shape[0]), idx] += resid.astype(np.float32)
        return out

    # Face part: front upper region of the head capsule.
    centroids = verts[faces].mean(axis=1)
    lo, hi = head_face_range
    for fi in range(lo, hi):
        c = centroids[fi]
        if c[2] > 0.02 and c[1] > 0.58:
            part_labels["face"].append(fi)

    # Joint regressor: Gaussian kernel with bandwidth set by the 12th nearest
    # vertex. A smooth cutoff keeps rows symmetric around each joint axis.
    regressor = np.zeros((len(JOINT_NAMES), verts.shape[0]))
    for j, pos in enumerate(joints):
        d = np.linalg.norm(verts - pos, axis=1)
        sigma = np.sort(d)[11]
        wj = np.exp(-((d / sigma) ** 2))
        wj[d > 2.0 * sigma] = 0.0
        regressor[j] = wj / wj.sum()

    # Shape basis: [overall scale, limb thickness | nose length, jaw width].
    basis = np.zeros((verts.shape[0], 3, 4))
    basis[:, :, 0] = verts
    basis[:, :, 1] = radial
    face_verts = np.zeros(verts.shape[0], dtype=bool)
    face_verts[faces[np.asarray(part_labels["face"], dtype=np.int64)].reshape(-1)] = True
    nose_anchor = np.array([0.0, 0.64, 0.105])
    fall = np.exp(-(np.linalg.norm(verts - nose_anchor, axis=1) / 0.05) ** 2)
    basis[face_verts, 2, 2] = 0.08 * fall[face_verts]
    jaw = face_verts & (verts[:, 1] < 0.62)
    basis[jaw, 0, 3] = 0.06 * np.sign(verts[jaw, 0]) * np.exp(
        -(((verts[jaw, 1] - 0.58) / 0.06) ** 2))

    keypoints = [Keypoint(n, "joint", i) for i, n in enumerate(JOINT_NAMES)]
    for kp_name, target in (
        ("nose_tip", (0.0, 0.64, 0.105)),
        ("eye_l", (0.04, 0.685, 0.095)),
        ("eye_r", (-0.04, 0.685, 0.095)),
        ("ear_l", (0.105, 0.66, 0.0)),
        ("ear_r", (-0.105, 0.66, 0.0)),
        ("jaw", (0.0, 0.565, 0.09)),
    ):
        idx = int(np.argmin(np.linalg.norm(verts - np.asarray(target), axis=1)))
        keypoints.append(Keypoint(kp_name, "vertex", idx, facial=True))

    # Smooth tri-color texture: softmax blend of low-frequency directional waves.
    palette = rng.uniform(0.15, 0.95, size=(3, 3))
    fields = np.stack([
        np.sin(verts @ rng.normal(size=3) * rng.uniform(2.0, 4.0) + rng.uniform(0, 2 * np.pi))
        for _ in range(3)
    ], axis=1)
    logits = 2.5 * fields
    wcol = np.exp(logits - logits.max(axis=1, keepdims=True))
    wcol /= wcol.sum(axis=1, keepdims=True)
    colors = wcol @ palette

    template = BodyTemplate(
        vertices_rest=verts.astype(np.float32),
        faces=faces.astype(np.uint32),
        shape_basis=basis.astype(np.float32),
        n_expression=2,
        joint_regressor=_renormalize_f32(regressor),
        parents=PARENTS.copy(),
        skin_weights=_renormalize_f32(weights),
        part_labels={k: np.asarray(sorted(v), dtype=np.uint32) for k, v in part_labels.items()},
        keypoints=keypoints,
        vertex_colors=colors.astype(np.float32),
    )
    template.validate()
    return template


def _rot_z(deg: float) -> np.ndarray:
    return quat_exp(np.deg2rad(deg) * np.array([0.0, 0.0, 1.0]))


def _rot_x(deg: float) -> np.ndarray:
    return quat_exp(np.deg2rad(deg) * np.array([1.0, 0.0, 0.0]))


def preset_pose(name: str, n_joints: int = 12) -> Pose:
    """Named canonical poses: 'a' (rest), 't' (arms out), 'y' (arms up), 'stride'."""
    pose = Pose.identity(n_joints)
    if name == "a":
        return pose
    if name == "t":
        pose.joint_rotations[L_SHOULDER] = _rot_z(40.0)
        pose.joint_rotations[R_SHOULDER] = _rot_z(-40.0)
        return pose
    if name == "y":
        pose.joint_rotations[L_SHOULDER] = _rot_z(85.0)
        pose.joint_rotations[R_SHOULDER] = _rot_z(-85.0)
        return pose
    if name == "stride":
        pose.joint_rotations[L_HIP] = _rot_x(25.0)
        pose.joint_rotations[R_HIP] = _rot_x(-20.0)
        pose.joint_rotations[L_KNEE] = _rot_x(-30.0)
        pose.joint_rotations[R_KNEE] = _rot_x(-10.0)
        pose.joint_rotations[L_SHOULDER] = _rot_x(-20.0)
        pose.joint_rotations[R_SHOULDER] = _rot_x(20.0)
        return pose
    raise ValueError(f"unknown pose preset '{name}' (expected a, t, y, or stride)")
