"""Diffusion schedule, score-distillation gradients, and guidance models.

The engine trains by distilling a denoiser's opinion of rendered images.
``OracleGuidance`` replaces a learned denoiser with the closed-form optimum
for a procedurally textured reference figure, so every distillation run has
an exact ground truth: the predicted-noise residual reduces to a known
multiple of (render - target), which the tests verify symbolically and by
Monte Carlo. A byte protocol stub lets a real diffusion backend attach over
a socket out-of-tree.
"""
from __future__ import annotations

import socket
import struct
import threading
from dataclasses import dataclass, field
from numbers import Integral
from typing import Callable

import numpy as np

from .body import BodyTemplate, Pose, lbs_transform
from .camera import Camera
from .mesh_raster import rasterize_mesh

DEFAULT_T_RANGE = (0.02, 0.98)
DEFAULT_CFG_SCALE = 50.0
GRAY_LEVEL = 0.5  # unconditional target level, also the target background
_TARGET_CACHE_LIMIT = 128


# ----------------------------------------------------------------- schedule

@dataclass
class DiffusionSchedule:
    """Forward-process noising coefficients over discrete timesteps.

    ``alpha_bar[t]`` is the cumulative signal power after t steps; it must
    stay in (0, 1), decrease strictly, and equal the cumulative product of
    the per-step ``alpha``.
    """

    alpha: np.ndarray  # [T] per-step signal retention
    alpha_bar: np.ndarray  # [T] cumulative product of alpha

    @property
    def n_steps(self) -> int:
        return self.alpha_bar.shape[0]

    def validate(self) -> None:
        a, ab = self.alpha, self.alpha_bar
        if a.shape != ab.shape or a.ndim != 1 or a.shape[0] == 0:
            raise ValueError("alpha and alpha_bar must be equal-length 1d arrays")
        if np.any(ab <= 0.0) or np.any(ab >= 1.0):
            raise ValueError("alpha_bar values must lie in (0, 1)")
        if np.any(np.diff(ab) >= 0.0):
            raise ValueError("alpha_bar must decrease strictly")
        if np.max(np.abs(ab - np.cumprod(a))) > 1e-9:
            raise ValueError("alpha_bar must equal the cumulative product of alpha")

    def check_t(self, t) -> int:
        if not isinstance(t, Integral):
            raise ValueError(f"timestep must be an integer, got {t!r}")
        t = int(t)
        if not 0 <= t < self.n_steps:
            raise ValueError(f"timestep {t} outside [0, {self.n_steps})")
        return t

    def signal_scale(self, t) -> float:
        """sqrt(alpha_bar[t]); single source so callers cancel bitwise."""
        return float(np.sqrt(self.alpha_bar[self.check_t(t)]))

    def noise_scale(self, t) -> float:
        """sqrt(1 - alpha_bar[t])."""
        return float(np.sqrt(1.0 - self.alpha_bar[self.check_t(t)]))


def linear_schedule(n_steps: int = 1000, beta_start: float = 1e-4,
                    beta_end: float = 2e-2) -> DiffusionSchedule:
    """Linear-beta schedule, the standard latent-diffusion parameterization."""
    beta = np.linspace(beta_start, beta_end, n_steps)
    alpha = 1.0 - beta
    schedule = DiffusionSchedule(alpha=alpha, alpha_bar=np.cumprod(alpha))
    schedule.validate()
    return schedule


def add_noise(x: np.ndarray, t, eps: np.ndarray,
              schedule: DiffusionSchedule) -> np.ndarray:
    """Forward process: x_t = sqrt(abar_t) x + sqrt(1 - abar_t) eps."""
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise ValueError("noise must match the image shape")
    return schedule.signal_scale(t) * x + schedule.noise_scale(t) * eps


# ----------------------------------------------------------------- guidance

@dataclass
class Condition:
    """Everything a guidance model may condition on for one denoise call.

    The oracle keys its target off (camera, pose); an external backend gets
    the rendered conditioning ``image`` plus the opaque ``token``.
    """

    camera: Camera
    pose: Pose
    image: np.ndarray | None = None  # [H, W, 3] conditioning pixels
    token: bytes = b""


class GuidanceModel:
    """Contract: denoise(x_t, t, condition) -> predicted noise, same shape."""

    def denoise(self, x_t: np.ndarray, t, condition: Condition) -> np.ndarray:
        raise NotImplementedError


def oracle_denoise(x_t: np.ndarray, t, target: np.ndarray,
                   schedule: DiffusionSchedule) -> np.ndarray:
    """Optimal denoiser when the data distribution is one known image."""
    return (x_t - schedule.signal_scale(t) * target) / schedule.noise_scale(t)


def procedural_texture(template: BodyTemplate, seed: int = 0,
                       n_bands: int = 6) -> np.ndarray:
    """Seeded tri-color band pattern over the rest mesh. [N_v, 3]

    Bands run along a seeded direction so different seeds give different
    but equally structured textures; the pattern lives on vertices, making
    every rendered target multi-view consistent.
    """
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    palette = np.array([[0.85, 0.25, 0.20], [0.20, 0.60, 0.85], [0.92, 0.80, 0.30]])
    u = np.asarray(template.vertices_rest, dtype=np.float64) @ axis
    span = max(u.max() - u.min(), 1e-9)
    band = np.floor((u - u.min()) / span * n_bands).astype(np.int64)
    return palette[band % 3]


def mannequin_target_provider(template: BodyTemplate, seed: int = 0,
                              background: float = GRAY_LEVEL) -> Callable:
    """(camera, pose) -> textured reference render with gray background."""
    colors = procedural_texture(template, seed)

    def provider(camera: Camera, pose: Pose) -> np.ndarray:
        lbs = lbs_transform(template, pose)
        raster = rasterize_mesh(lbs.vertices, template.faces, camera, colors)
        bg = (1.0 - raster.silhouette)[:, :, None] * background
        return raster.color + bg

    return provider


def _condition_key(camera: Camera, pose: Pose) -> tuple:
    return (camera.width, camera.height, camera.fx, camera.fy, camera.cx,
            camera.cy, camera.rotation.tobytes(), camera.translation.tobytes(),
            pose.joint_rotations.tobytes(), pose.global_rotation.tobytes(),
            pose.global_translation.tobytes(), pose.shape.tobytes(),
            pose.expression.tobytes())


@dataclass
class OracleGuidance(GuidanceModel):
    """Closed-form denoiser toward deterministic per-view target images.

    Classifier-free guidance interpolates between the unconditional
    prediction (toward a flat gray image) and the conditional one:
    eps_hat = (1 - s) eps_u + s eps_c, exactly the conditional at s = 1.
    """

    schedule: DiffusionSchedule
    target_provider: Callable  # (camera, pose) -> [H, W, 3]
    cfg_scale: float = DEFAULT_CFG_SCALE
    gray_level: float = GRAY_LEVEL
    _cache: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def target(self, camera: Camera, pose: Pose) -> np.ndarray:
        """Deterministic target image for one view; treat as read-only."""
        key = _condition_key(camera, pose)
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        image = self.target_provider(camera, pose)
        image.setflags(write=False)
        with self._lock:
            if len(self._cache) >= _TARGET_CACHE_LIMIT:
                self._cache.pop(next(iter(self._cache)))
            self._cache[key] = image
        return image

    def denoise(self, x_t: np.ndarray, t, condition: Condition) -> np.ndarray:
        if not isinstance(condition, Condition):
            raise TypeError("oracle guidance needs a Condition with camera and pose")
        target = self.target(condition.camera, condition.pose)
        if target.shape != x_t.shape:
            raise ValueError(f"noisy image {x_t.shape} vs target {target.shape}")
        eps_c = oracle_denoise(x_t, t, target, self.schedule)
        s = self.cfg_scale
        if s == 1.0:
            return eps_c
        gray = np.full_like(x_t, self.gray_level)
        eps_u = oracle_denoise(x_t, t, gray, self.schedule)
        return (1.0 - s) * eps_u + s * eps_c


# ------------------------------------------------------- score distillation

@dataclass
class SdsResult:
    """One single-sample distillation step: hook output plus diagnostics."""

    grads: object  # whatever the backward hook returned
    t: int
    weight: float
    residual_norm: float  # rms of the weighted residual pushed into the hook


def sample_timestep(rng: np.random.Generator, schedule: DiffusionSchedule,
                    t_range: tuple[float, float]) -> int:
    """Uniform integer timestep from a fraction range of [0, T)."""
    lo_f, hi_f = t_range
    if not (0.0 <= lo_f <= hi_f <= 1.0):
        raise ValueError(f"t_range must satisfy 0 <= lo <= hi <= 1, got {t_range}")
    n = schedule.n_steps
    lo = min(int(lo_f * n), n - 1)
    hi = min(max(int(hi_f * n), lo + 1), n)
    if hi == lo:  # degenerate range pinned to the last step
        hi = lo + 1
    return int(rng.integers(lo, hi))


def sds_gradient(render: np.ndarray, backward_hook: Callable,
                 schedule: DiffusionSchedule, guidance: GuidanceModel,
                 condition: Condition, *, seed: int, call_index: int = 0,
                 t_range: tuple[float, float] = DEFAULT_T_RANGE,
                 weight_fn: Callable | None = None,
                 chain_xt: bool = False) -> SdsResult:
    """Single-sample score-distillation gradient through a render backward.

    Samples t and unit noise from a generator seeded with ``seed XOR
    call_index``, noises the render, asks the guidance model to denoise,
    and pushes weight(t) * (eps_hat - eps) through ``backward_hook``. The
    noise entering the residual is re-derived from x_t, so a guidance
    model that inverts the forward process cancels bitwise: rendering the
    target exactly yields exactly-zero gradients for every seed.

    ``chain_xt`` multiplies in the sqrt(abar_t) from d x_t / d render; the
    default drops it, the common practical convention.
    """
    render = np.asarray(render, dtype=np.float64)
    rng = np.random.default_rng(int(seed) ^ int(call_index))
    t = sample_timestep(rng, schedule, t_range)
    eps = rng.standard_normal(render.shape)
    x_t = add_noise(render, t, eps, schedule)
    eps_hat = guidance.denoise(x_t, t, condition)
    if eps_hat.shape != render.shape or not np.all(np.isfinite(eps_hat)):
        raise ValueError("guidance returned a non-finite or misshaped prediction")
    signal, noise = schedule.signal_scale(t), schedule.noise_scale(t)
    eps_rederived = (x_t - signal * render) / noise
    weight = 1.0 if weight_fn is None else float(weight_fn(t))
    grad_image = weight * (eps_hat - eps_rederived)
    if chain_xt:
        grad_image = signal * grad_image
    rms = float(np.sqrt(np.mean(grad_image ** 2)))
    return SdsResult(grads=backward_hook(grad_image), t=t, weight=weight,
                     residual_norm=rms)


# ------------------------------------------------- external backend protocol

def pack_tensor(arr: np.ndarray) -> bytes:
    """Wire format: u32-LE rank, u32-LE dims, float32-LE payload."""
    arr = np.asarray(arr, dtype="<f4")  # tobytes always emits C order
    header = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def _read_exact(reader, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        piece = reader(n - got)
        if not piece:
            raise ConnectionError("guidance backend closed the stream early")
        chunks.append(piece)
        got += len(piece)
    return b"".join(chunks)


def read_tensor(reader) -> np.ndarray:
    """Inverse of pack_tensor from a read(n) callable."""
    (ndim,) = struct.unpack("<I", _read_exact(reader, 4))
    if ndim > 8:
        raise ValueError(f"tensor rank {ndim} exceeds protocol limit")
    shape = struct.unpack(f"<{ndim}I", _read_exact(reader, 4 * ndim)) if ndim else ()
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    payload = _read_exact(reader, 4 * count)
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


@dataclass
class ExternalGuidance(GuidanceModel):
    """Socket stub for an out-of-tree denoiser; no backend ships here.

    Request: u32-LE token length + token bytes, u32-LE timestep, packed
    x_t tensor, packed conditioning image tensor (a rank-0 scalar stands
    for "no conditioning image"). Response: one packed predicted-noise
    tensor. One connection per call, so concurrent denoise calls are
    independent.
    """

    address: tuple[str, int] | str  # (host, port) or unix socket path

    def denoise(self, x_t: np.ndarray, t, condition: Condition) -> np.ndarray:
        token = condition.token if isinstance(condition, Condition) else b""
        cond_image = condition.image if isinstance(condition, Condition) else None
        family = socket.AF_UNIX if isinstance(self.address, str) else socket.AF_INET
        with socket.socket(family, socket.SOCK_STREAM) as sock:
            sock.connect(self.address)
            msg = [struct.pack("<I", len(token)), token,
                   struct.pack("<I", int(t)), pack_tensor(x_t)]
            absent = np.zeros((), dtype=np.float32)
            msg.append(pack_tensor(absent if cond_image is None else cond_image))
            sock.sendall(b"".join(msg))
            sock.shutdown(socket.SHUT_WR)
            eps_hat = read_tensor(sock.recv)
        if eps_hat.shape != tuple(x_t.shape):
            raise ValueError("backend returned a mismatched tensor shape")
        return np.asarray(eps_hat, dtype=np.float64)
