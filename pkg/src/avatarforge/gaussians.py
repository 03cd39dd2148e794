"""3D Gaussian primitive storage and the hybrid avatar container.

Gaussians are stored struct-of-arrays with optimizer-friendly
parameterizations: rotation as a unit quaternion, per-axis scale as its
log, opacity as a logit. A :class:`HybridAvatar` partitions its Gaussians
into unconstrained members (skinned directly via blend weights) and
mesh-bound members (riding on body-part triangles).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fileio
from .rotations import quat_to_mat

AVATAR_MAGIC = b"HGAVAT01"
KIND_UNCONSTRAINED = 0
KIND_MESH_BINDING = 1

# Fixed placeholder so checkpoint bytes depend only on content; callers that
# want wall-clock provenance pass an explicit timestamp.
DEFAULT_TIMESTAMP = "1970-01-01T00:00:00Z"


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianSet:
    """Struct-of-arrays bag of 3D Gaussians.

    Storage is float32 by default; float64 is supported for gradient testing.
    """

    position: np.ndarray  # [N, 3]
    rotation: np.ndarray  # [N, 4] unit quaternions (w, x, y, z)
    log_scale: np.ndarray  # [N, 3]
    opacity_logit: np.ndarray  # [N]
    color: np.ndarray  # [N, 3] in [0, 1]
    dtype: np.dtype = np.float32

    def __post_init__(self):
        self.position = np.ascontiguousarray(self.position, dtype=self.dtype).reshape(-1, 3)
        n = self.position.shape[0]
        self.rotation = np.ascontiguousarray(self.rotation, dtype=self.dtype).reshape(n, 4)
        self.log_scale = np.ascontiguousarray(self.log_scale, dtype=self.dtype).reshape(n, 3)
        self.opacity_logit = np.ascontiguousarray(self.opacity_logit, dtype=self.dtype).reshape(n)
        self.color = np.ascontiguousarray(self.color, dtype=self.dtype).reshape(n, 3)

    def __len__(self) -> int:
        return self.position.shape[0]

    @staticmethod
    def empty(n: int = 0) -> "GaussianSet":
        rot = np.zeros((n, 4), dtype=np.float32)
        rot[:, 0] = 1.0
        return GaussianSet(np.zeros((n, 3)), rot, np.zeros((n, 3)), np.zeros(n),
                           np.full((n, 3), 0.5))

    @property
    def scale(self) -> np.ndarray:
        """Per-axis standard deviations exp(log_scale). [N, 3]"""
        return np.exp(self.log_scale.astype(np.float64))

    @property
    def opacity(self) -> np.ndarray:
        """Opacities in (0, 1) via the logistic map. [N]"""
        return sigmoid(self.opacity_logit.astype(np.float64))

    def validate(self) -> None:
        for name in ("position", "rotation", "log_scale", "opacity_logit", "color"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")
        norm_err = np.abs(np.linalg.norm(self.rotation.astype(np.float64), axis=1) - 1.0)
        if len(self) and norm_err.max() > 1e-6:
            raise ValueError("rotations must be unit quaternions within 1e-6")
        if len(self) and (self.color.min() < 0.0 or self.color.max() > 1.0):
            raise ValueError("colors must lie in [0, 1]")

    def covariance(self) -> np.ndarray:
        """World covariance R diag(s^2) R^T per Gaussian. [N, 3, 3]"""
        R = quat_to_mat(self.rotation.astype(np.float64))
        s2 = self.scale**2
        return np.einsum("nab,nb,ncb->nac", R, s2, R)

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """Unnormalized Gaussian falloff of every member at every point. [N, M]"""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        R = quat_to_mat(self.rotation.astype(np.float64))  # [N, 3, 3]
        inv_s = 1.0 / self.scale  # [N, 3]
        diff = points[None, :, :] - self.position.astype(np.float64)[:, None, :]  # [N, M, 3]
        local = np.einsum("nba,nmb->nma", R, diff) * inv_s[:, None, :]
        return np.exp(-0.5 * np.einsum("nma,nma->nm", local, local))

    def take(self, index: np.ndarray) -> "GaussianSet":
        return GaussianSet(self.position[index], self.rotation[index],
                           self.log_scale[index], self.opacity_logit[index],
                           self.color[index], dtype=self.dtype)

    def copy(self) -> "GaussianSet":
        return GaussianSet(self.position.copy(), self.rotation.copy(),
                           self.log_scale.copy(), self.opacity_logit.copy(),
                           self.color.copy(), dtype=self.dtype)

    def parameters(self) -> dict[str, np.ndarray]:
        """Live views of the optimizable arrays, keyed by field name."""
        return {"position": self.position, "rotation": self.rotation,
                "log_scale": self.log_scale, "opacity_logit": self.opacity_logit,
                "color": self.color}


@dataclass
class HybridAvatar:
    """Gaussian avatar split into unconstrained and mesh-bound members.

    ``kind`` partitions the set; binding arrays align with the bound subset
    in order, ``lbs_weights`` rows align with the unconstrained subset.
    ``part_shape`` holds the learnable shape/expression coefficients applied
    to bound-part geometry (full basis vector, body block then expressions).
    """

    gaussians: GaussianSet
    kind: np.ndarray  # [N] uint8
    lbs_weights: np.ndarray  # [N_u, N_j] float32
    binding_part: np.ndarray  # [N_m] int32 index into part_names
    binding_face: np.ndarray  # [N_m] uint32 triangle index into the template
    binding_bary: np.ndarray  # [N_m, 3] float32 barycentric coordinates
    binding_offset: np.ndarray  # [N_m] float32 signed normal offset
    part_names: list[str]
    part_shape: np.ndarray  # [N_b] float32
    template_ref: str = ""
    field_ref: str = ""
    deform_meta: dict | None = None
    deform_arrays: dict[str, np.ndarray] = field(default_factory=dict)
    # Nearest canonical template vertex per unconstrained member, cached at
    # initialization so shape edits stay reversible. [N_u] or None.
    anchor_vertices: np.ndarray | None = None

    def __post_init__(self):
        self.kind = np.ascontiguousarray(self.kind, dtype=np.uint8).reshape(-1)
        self.lbs_weights = np.ascontiguousarray(self.lbs_weights, dtype=np.float32)
        self.binding_part = np.ascontiguousarray(self.binding_part, dtype=np.int32).reshape(-1)
        self.binding_face = np.ascontiguousarray(self.binding_face, dtype=np.uint32).reshape(-1)
        self.binding_bary = np.ascontiguousarray(self.binding_bary, dtype=np.float32).reshape(-1, 3)
        self.binding_offset = np.ascontiguousarray(self.binding_offset, dtype=np.float32).reshape(-1)
        self.part_shape = np.ascontiguousarray(self.part_shape, dtype=np.float32).reshape(-1)
        if self.anchor_vertices is not None:
            self.anchor_vertices = np.ascontiguousarray(self.anchor_vertices, dtype=np.int32).reshape(-1)

    @property
    def unconstrained_index(self) -> np.ndarray:
        return np.nonzero(self.kind == KIND_UNCONSTRAINED)[0]

    @property
    def bound_index(self) -> np.ndarray:
        return np.nonzero(self.kind == KIND_MESH_BINDING)[0]

    @property
    def n_unconstrained(self) -> int:
        return int(np.sum(self.kind == KIND_UNCONSTRAINED))

    @property
    def n_bound(self) -> int:
        return int(np.sum(self.kind == KIND_MESH_BINDING))

    def validate(self) -> None:
        self.gaussians.validate()
        n = len(self.gaussians)
        if self.kind.shape != (n,) or not np.all(np.isin(self.kind, [KIND_UNCONSTRAINED, KIND_MESH_BINDING])):
            raise ValueError("kind must tag every Gaussian as unconstrained or mesh_binding")
        n_u, n_m = self.n_unconstrained, self.n_bound
        if self.lbs_weights.shape[0] != n_u:
            raise ValueError("lbs_weights rows must align with unconstrained members")
        if n_u:
            w = self.lbs_weights.astype(np.float64)
            if w.min() < 0 or np.abs(w.sum(axis=1) - 1.0).max() > 1e-6:
                raise ValueError("lbs_weights rows must be non-negative and sum to 1")
        for name in ("binding_part", "binding_face", "binding_bary", "binding_offset"):
            if getattr(self, name).shape[0] != n_m:
                raise ValueError(f"{name} rows must align with bound members")
        if n_m:
            b = self.binding_bary.astype(np.float64)
            if b.min() < 0 or np.abs(b.sum(axis=1) - 1.0).max() > 1e-6:
                raise ValueError("barycentric coordinates must be non-negative and sum to 1")
            if self.binding_part.min() < 0 or self.binding_part.max() >= len(self.part_names):
                raise ValueError("binding_part references an unknown part")
        if self.anchor_vertices is not None and self.anchor_vertices.shape[0] != n_u:
            raise ValueError("anchor_vertices rows must align with unconstrained members")

    @staticmethod
    def from_unconstrained(gaussians: GaussianSet, lbs_weights: np.ndarray,
                           n_basis: int = 0, template_ref: str = "",
                           field_ref: str = "") -> "HybridAvatar":
        n = len(gaussians)
        return HybridAvatar(
            gaussians=gaussians,
            kind=np.zeros(n, dtype=np.uint8),
            lbs_weights=np.asarray(lbs_weights, dtype=np.float32),
            binding_part=np.zeros(0, dtype=np.int32),
            binding_face=np.zeros(0, dtype=np.uint32),
            binding_bary=np.zeros((0, 3), dtype=np.float32),
            binding_offset=np.zeros(0, dtype=np.float32),
            part_names=[],
            part_shape=np.zeros(n_basis, dtype=np.float32),
            template_ref=template_ref,
            field_ref=field_ref,
        )

    def copy(self) -> "HybridAvatar":
        return HybridAvatar(
            gaussians=self.gaussians.copy(), kind=self.kind.copy(),
            lbs_weights=self.lbs_weights.copy(), binding_part=self.binding_part.copy(),
            binding_face=self.binding_face.copy(), binding_bary=self.binding_bary.copy(),
            binding_offset=self.binding_offset.copy(), part_names=list(self.part_names),
            part_shape=self.part_shape.copy(), template_ref=self.template_ref,
            field_ref=self.field_ref,
            deform_meta=None if self.deform_meta is None else dict(self.deform_meta),
            deform_arrays={k: v.copy() for k, v in self.deform_arrays.items()},
            anchor_vertices=None if self.anchor_vertices is None else self.anchor_vertices.copy(),
        )


def save_avatar(path, avatar: HybridAvatar, timestamp: str = DEFAULT_TIMESTAMP) -> None:
    """Write an avatar container (magic ``HGAVAT01``); bit-exact round trip.

    The timestamp is provenance only; identical content with the default
    timestamp yields identical bytes.
    """
    avatar.validate()
    g = avatar.gaussians
    header = {
        "version": 1,
        "counts": {"total": len(g), "unconstrained": avatar.n_unconstrained,
                   "bound": avatar.n_bound},
        "part_names": list(avatar.part_names),
        "template_ref": avatar.template_ref,
        "field_ref": avatar.field_ref,
        "deform_meta": avatar.deform_meta,
        "created": timestamp,
    }
    arrays = [
        ("position", g.position.astype(np.float32)),
        ("rotation", g.rotation.astype(np.float32)),
        ("log_scale", g.log_scale.astype(np.float32)),
        ("opacity_logit", g.opacity_logit.astype(np.float32)),
        ("color", g.color.astype(np.float32)),
        ("kind", avatar.kind), ("lbs_weights", avatar.lbs_weights),
        ("binding_part", avatar.binding_part), ("binding_face", avatar.binding_face),
        ("binding_bary", avatar.binding_bary), ("binding_offset", avatar.binding_offset),
        ("part_shape", avatar.part_shape),
    ]
    if avatar.anchor_vertices is not None:
        arrays.append(("anchor_vertices", avatar.anchor_vertices))
    for name in sorted(avatar.deform_arrays):
        arrays.append((f"deform:{name}", avatar.deform_arrays[name].astype(np.float32)))
    fileio.write_blob_file(path, AVATAR_MAGIC, header, arrays)


def load_avatar(path) -> HybridAvatar:
    header, arrays = fileio.read_blob_file(path, AVATAR_MAGIC)
    try:
        avatar = HybridAvatar(
            gaussians=GaussianSet(arrays["position"], arrays["rotation"],
                                  arrays["log_scale"], arrays["opacity_logit"],
                                  arrays["color"]),
            kind=arrays["kind"],
            lbs_weights=arrays["lbs_weights"],
            binding_part=arrays["binding_part"],
            binding_face=arrays["binding_face"],
            binding_bary=arrays["binding_bary"],
            binding_offset=arrays["binding_offset"],
            part_names=list(header["part_names"]),
            part_shape=arrays["part_shape"],
            template_ref=header.get("template_ref", ""),
            field_ref=header.get("field_ref", ""),
            deform_meta=header.get("deform_meta"),
            deform_arrays={k[len("deform:"):]: v for k, v in arrays.items()
                           if k.startswith("deform:")},
            anchor_vertices=arrays.get("anchor_vertices"),
        )
    except KeyError as e:
        raise fileio.FormatError(f"{path}: missing field {e}") from e
    avatar.validate()
    return avatar
