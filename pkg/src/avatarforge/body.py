"""Parametric body template: shaped canonical mesh and linear blend skinning.

A :class:`BodyTemplate` bundles rest geometry, a linear shape basis, a joint
regressor, a kinematic tree, and skin weights. :func:`canonical_mesh` applies
shape and expression coefficients in the canonical pose; :func:`lbs_transform`
poses the shaped mesh with per-joint rotations plus a global rigid transform.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import fileio
from .rotations import normalize_quat, quat_to_mat

TEMPLATE_MAGIC = b"ABTEMP01"
UNIT_QUAT_TOL = 1e-6


@dataclass(frozen=True)
class Keypoint:
    """Named anchor on the body, either a joint or a surface vertex."""

    name: str
    kind: str  # "joint" or "vertex"
    index: int
    facial: bool = False


@dataclass
class Pose:
    """Articulation state: per-joint local rotations plus a global rigid move.

    Quaternions are (w, x, y, z) and must be unit length within tolerance.
    """

    joint_rotations: np.ndarray  # [N_j, 4]
    global_rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    global_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    shape: np.ndarray = field(default_factory=lambda: np.zeros(0))
    expression: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.joint_rotations = np.asarray(self.joint_rotations, dtype=np.float64).reshape(-1, 4)
        self.global_rotation = np.asarray(self.global_rotation, dtype=np.float64).reshape(4)
        self.global_translation = np.asarray(self.global_translation, dtype=np.float64).reshape(3)
        self.shape = np.asarray(self.shape, dtype=np.float64).reshape(-1)
        self.expression = np.asarray(self.expression, dtype=np.float64).reshape(-1)

    @staticmethod
    def identity(n_joints: int, shape=(), expression=()) -> "Pose":
        quats = np.zeros((n_joints, 4))
        quats[:, 0] = 1.0
        return Pose(quats, shape=np.asarray(shape, dtype=np.float64),
                    expression=np.asarray(expression, dtype=np.float64))

    def validate(self) -> None:
        for name, q in (("joint_rotations", self.joint_rotations),
                        ("global_rotation", self.global_rotation.reshape(1, 4))):
            err = np.abs(np.linalg.norm(q, axis=-1) - 1.0)
            if not np.all(np.isfinite(q)) or err.max(initial=0.0) > UNIT_QUAT_TOL:
                raise ValueError(f"{name}: quaternions must be unit length within {UNIT_QUAT_TOL}")

    def copy(self) -> "Pose":
        return Pose(self.joint_rotations.copy(), self.global_rotation.copy(),
                    self.global_translation.copy(), self.shape.copy(), self.expression.copy())


@dataclass
class BodyTemplate:
    """Rest mesh with shape basis, joint regressor, kinematic tree, skinning.

    The trailing ``n_expression`` columns of ``shape_basis`` are expression
    directions; the leading columns are body shape directions. ``parents``
    uses -1 for the single root and satisfies ``parents[i] < i``.
    """

    vertices_rest: np.ndarray  # [N_v, 3] float32
    faces: np.ndarray  # [N_f, 3] uint32
    shape_basis: np.ndarray  # [N_v, 3, N_b] float32
    n_expression: int
    joint_regressor: np.ndarray  # [N_j, N_v] float32, rows sum to 1
    parents: np.ndarray  # [N_j] int32, -1 marks the root
    skin_weights: np.ndarray  # [N_v, N_j] float32, rows sum to 1
    part_labels: dict[str, np.ndarray]  # part name -> face indices (uint32)
    keypoints: list[Keypoint]
    vertex_colors: np.ndarray | None = None  # [N_v, 3] float32 in [0, 1]

    @property
    def n_vertices(self) -> int:
        return self.vertices_rest.shape[0]

    @property
    def n_joints(self) -> int:
        return self.parents.shape[0]

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[2] - self.n_expression

    def joint_names(self) -> list[str]:
        names = [""] * self.n_joints
        for kp in self.keypoints:
            if kp.kind == "joint":
                names[kp.index] = kp.name
        return names

    def bone_edges(self) -> np.ndarray:
        """Parent-child joint index pairs, one row per non-root joint. [N_j-1, 2]"""
        child = np.nonzero(self.parents >= 0)[0]
        return np.stack([self.parents[child], child], axis=1).astype(np.int32)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices_rest.min(axis=0), self.vertices_rest.max(axis=0)

    def validate(self) -> None:
        nv, nj = self.n_vertices, self.n_joints
        if self.vertices_rest.shape != (nv, 3) or not np.all(np.isfinite(self.vertices_rest)):
            raise ValueError("vertices_rest must be finite [N_v, 3]")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3 or self.faces.max(initial=0) >= nv:
            raise ValueError("faces must index valid vertices")
        if self.shape_basis.shape[:2] != (nv, 3):
            raise ValueError("shape_basis must be [N_v, 3, N_b]")
        if not 0 <= self.n_expression <= self.shape_basis.shape[2]:
            raise ValueError("n_expression exceeds shape basis size")
        if self.joint_regressor.shape != (nj, nv):
            raise ValueError("joint_regressor must be [N_j, N_v]")
        if np.any(self.joint_regressor < 0) or np.max(np.abs(self.joint_regressor.astype(np.float64).sum(axis=1) - 1.0)) > 1e-6:
            raise ValueError("joint_regressor rows must be non-negative and sum to 1")
        if self.skin_weights.shape != (nv, nj):
            raise ValueError("skin_weights must be [N_v, N_j]")
        if np.any(self.skin_weights < 0) or np.max(np.abs(self.skin_weights.astype(np.float64).sum(axis=1) - 1.0)) > 1e-6:
            raise ValueError("skin_weights rows must be non-negative and sum to 1")
        if int(np.sum(self.parents < 0)) != 1:
            raise ValueError("parents must contain exactly one root (-1)")
        for i, p in enumerate(self.parents):
            if p >= i:
                raise ValueError("parents must satisfy parents[i] < i")
        seen: set[int] = set()
        for name, ids in self.part_labels.items():
            ids_set = set(int(i) for i in ids)
            if ids_set and max(ids_set) >= self.faces.shape[0]:
                raise ValueError(f"part '{name}' references invalid faces")
            if seen & ids_set:
                raise ValueError(f"part '{name}' overlaps another part")
            seen |= ids_set
        for kp in self.keypoints:
            limit = nj if kp.kind == "joint" else nv
            if kp.kind not in ("joint", "vertex") or not 0 <= kp.index < limit:
                raise ValueError(f"keypoint '{kp.name}' is out of range")

    def part_vertex_mask(self, part: str) -> np.ndarray:
        """Boolean mask of vertices used by the faces of a named part. [N_v]"""
        mask = np.zeros(self.n_vertices, dtype=bool)
        ids = self.part_labels[part]
        mask[self.faces[ids].reshape(-1)] = True
        return mask


def canonical_mesh(template: BodyTemplate, pose: Pose) -> np.ndarray:
    """Shaped vertices in the canonical pose: rest + basis @ coefficients. [N_v, 3]

    ``pose.shape`` fills the leading body-shape columns and
    ``pose.expression`` the trailing expression columns; unused columns are 0.
    """
    n_body = template.n_shape
    if pose.shape.shape[0] > n_body:
        raise ValueError(f"got {pose.shape.shape[0]} shape coefficients, template has {n_body}")
    if pose.expression.shape[0] > template.n_expression:
        raise ValueError(
            f"got {pose.expression.shape[0]} expression coefficients, "
            f"template has {template.n_expression}")
    coeffs = np.zeros(template.shape_basis.shape[2])
    coeffs[: pose.shape.shape[0]] = pose.shape
    if pose.expression.shape[0]:
        coeffs[n_body : n_body + pose.expression.shape[0]] = pose.expression
    verts = template.vertices_rest.astype(np.float64) + template.shape_basis.astype(np.float64) @ coeffs
    return verts


def joint_positions(template: BodyTemplate, vertices: np.ndarray) -> np.ndarray:
    """Joint locations regressed from mesh vertices. [N_j, 3]"""
    return template.joint_regressor.astype(np.float64) @ np.asarray(vertices, dtype=np.float64)


@dataclass
class LbsResult:
    """Posed geometry plus the per-joint world transforms that produced it.

    ``joint_rotations`` / ``joint_translations`` give rigid maps B_j with
    ``x_posed = sum_j w_j (B_j_rot @ x_canonical + B_j_t)``; the global
    rotation and translation are already folded in.
    """

    vertices: np.ndarray  # [N_v, 3] posed, observation space
    vertices_canonical: np.ndarray  # [N_v, 3] shaped canonical mesh
    joint_rotations: np.ndarray  # [N_j, 3, 3]
    joint_translations: np.ndarray  # [N_j, 3]
    joints_canonical: np.ndarray  # [N_j, 3]
    joints_posed: np.ndarray  # [N_j, 3]

    def transform_points(self, points: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """Apply the blended rigid maps to arbitrary canonical points. [N, 3]"""
        rot = np.einsum("nj,jab->nab", weights, self.joint_rotations)
        trn = weights @ self.joint_translations
        return np.einsum("nab,nb->na", rot, points) + trn


def joint_world_transforms(template: BodyTemplate, pose: Pose,
                           joints_canonical: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward kinematics: rigid canonical-to-posed map per joint.

    Local rotations pivot at the canonical joint position and compose
    parent to child; the global rigid transform is applied last.
    Returns rotations [N_j, 3, 3] and translations [N_j, 3].
    """
    n_j = template.n_joints
    local_rot = quat_to_mat(pose.joint_rotations)  # [N_j, 3, 3]
    rot = np.empty((n_j, 3, 3))
    trn = np.empty((n_j, 3))
    for j in range(n_j):
        p = template.parents[j]
        if p < 0:
            rot[j] = local_rot[j]
            trn[j] = joints_canonical[j] - local_rot[j] @ joints_canonical[j]
        else:
            # B_j = B_parent o (rotate about the canonical joint position)
            pivot = joints_canonical[j] - local_rot[j] @ joints_canonical[j]
            rot[j] = rot[p] @ local_rot[j]
            trn[j] = rot[p] @ pivot + trn[p]
    g_rot = quat_to_mat(pose.global_rotation)
    rot = np.einsum("ab,jbc->jac", g_rot, rot)
    trn = trn @ g_rot.T + pose.global_translation
    return rot, trn


def lbs_transform(template: BodyTemplate, pose: Pose) -> LbsResult:
    """Pose the shaped mesh with linear blend skinning.

    Shapes the canonical mesh, regresses canonical joints, runs forward
    kinematics, and blends per-joint rigid maps with the skinning weights.
    """
    pose.validate()
    verts_cnl = canonical_mesh(template, pose)
    joints_cnl = joint_positions(template, verts_cnl)
    rot, trn = joint_world_transforms(template, pose, joints_cnl)
    w = template.skin_weights.astype(np.float64)
    blend_rot = np.einsum("nj,jab->nab", w, rot)  # [N_v, 3, 3]
    blend_trn = w @ trn  # [N_v, 3]
    verts = np.einsum("nab,nb->na", blend_rot, verts_cnl) + blend_trn
    joints_posed = np.einsum("jab,jb->ja", rot, joints_cnl) + trn
    return LbsResult(vertices=verts, vertices_canonical=verts_cnl,
                     joint_rotations=rot, joint_translations=trn,
                     joints_canonical=joints_cnl, joints_posed=joints_posed)


def save_template(path, template: BodyTemplate) -> None:
    """Write a template container (magic ``ABTEMP01``); bit-exact round trip."""
    template.validate()
    header = {
        "n_expression": template.n_expression,
        "parts": sorted(template.part_labels.keys()),
        "keypoints": [
            {"name": kp.name, "kind": kp.kind, "index": kp.index, "facial": kp.facial}
            for kp in template.keypoints
        ],
        "has_colors": template.vertex_colors is not None,
    }
    arrays = [
        ("vertices_rest", template.vertices_rest.astype(np.float32)),
        ("faces", template.faces.astype(np.uint32)),
        ("shape_basis", template.shape_basis.astype(np.float32)),
        ("joint_regressor", template.joint_regressor.astype(np.float32)),
        ("parents", template.parents.astype(np.int32)),
        ("skin_weights", template.skin_weights.astype(np.float32)),
    ]
    for name in header["parts"]:
        arrays.append((f"part:{name}", np.asarray(template.part_labels[name], dtype=np.uint32)))
    if template.vertex_colors is not None:
        arrays.append(("vertex_colors", template.vertex_colors.astype(np.float32)))
    fileio.write_blob_file(path, TEMPLATE_MAGIC, header, arrays)


def load_template(path) -> BodyTemplate:
    header, arrays = fileio.read_blob_file(path, TEMPLATE_MAGIC)
    try:
        template = BodyTemplate(
            vertices_rest=arrays["vertices_rest"],
            faces=arrays["faces"],
            shape_basis=arrays["shape_basis"],
            n_expression=int(header["n_expression"]),
            joint_regressor=arrays["joint_regressor"],
            parents=arrays["parents"],
            skin_weights=arrays["skin_weights"],
            part_labels={name: arrays[f"part:{name}"] for name in header["parts"]},
            keypoints=[Keypoint(kp["name"], kp["kind"], int(kp["index"]), bool(kp["facial"]))
                       for kp in header["keypoints"]],
            vertex_colors=arrays.get("vertex_colors"),
        )
    except KeyError as e:
        raise fileio.FormatError(f"{path}: missing field {e}") from e
    template.validate()
    return template


def with_baked_shape(template: BodyTemplate, shape: np.ndarray,
                     expression: np.ndarray | None = None) -> BodyTemplate:
    """Template whose rest mesh has the given coefficients folded in."""
    pose = Pose.identity(template.n_joints,
                         shape=shape,
                         expression=() if expression is None else expression)
    verts = canonical_mesh(template, pose).astype(np.float32)
    return replace(template, vertices_rest=verts)
