"""Pinhole camera shared by the splat renderer, field renderer, and skeleton rasterizer.

Conventions: right-handed camera frame with +x right, +y down, +z forward
(looking direction). A world point X maps to pixel coordinates via
u = fx * Xc/Zc + cx, v = fy * Yc/Zc + cy where (Xc, Yc, Zc) = R @ X + t.
Continuous pixel coordinates place the center of pixel (row r, col c) at
(c + 0.5, r + 0.5).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # [3, 3] world-to-camera rotation
    translation: np.ndarray  # [3] world-to-camera translation
    near: float = 0.05
    far: float = 20.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ValueError("require 0 < near < far")
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        """Transform [N, 3] world points into the camera frame."""
        return points @ self.rotation.T + self.translation

    def project_points(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project [N, 3] world points; returns ([N, 2] pixels, [N] depths).

        Points behind the camera get non-finite pixels; callers cull by depth.
        """
        pc = self.world_to_camera(points)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[:, 0] / z + self.cx
            v = self.fy * pc[:, 1] / z + self.cy
        return np.stack([u, v], axis=1), z

    def ray_directions(self, dtype=np.float64) -> np.ndarray:
        """Per-pixel world-space ray directions, z-normalized, shape [H, W, 3].

        Directions have unit camera-z component so the ray parameter equals
        camera depth, which keeps quadrature deltas and depth maps in the
        same units as the splat and mesh rasterizers.
        """
        c = (np.arange(self.width, dtype=dtype) + 0.5 - self.cx) / self.fx
        r = (np.arange(self.height, dtype=dtype) + 0.5 - self.cy) / self.fy
        xx, yy = np.meshgrid(c, r)
        dirs_cam = np.stack([xx, yy, np.ones_like(xx)], axis=-1)
        return dirs_cam @ self.rotation.astype(dtype)  # (R^T d) per pixel

    @property
    def origin(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def resized(self, width: int, height: int) -> "Camera":
        """Same view at a different resolution (intrinsics rescaled)."""
        sx, sy = width / self.width, height / self.height
        return Camera(
            fx=self.fx * sx, fy=self.fy * sy, cx=self.cx * sx, cy=self.cy * sy,
            width=width, height=height,
            rotation=self.rotation, translation=self.translation,
            near=self.near, far=self.far,
        )


def look_at_camera(
    eye: np.ndarray,
    target: np.ndarray,
    width: int,
    height: int,
    fov_y_deg: float,
    up: np.ndarray = (0.0, 1.0, 0.0),
    near: float = 0.05,
    far: float = 20.0,
) -> Camera:
    """Build a camera at `eye` looking at `target` with a vertical FoV."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("eye and target coincide")
    fwd = fwd / n
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        # looking straight along up; pick an arbitrary perpendicular
        upv = np.array([0.0, 0.0, 1.0]) if abs(fwd[1]) > 0.9 else np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, upv)
        rn = np.linalg.norm(right)
    right /= rn
    down = np.cross(fwd, right)  # +y is down in camera frame
    rot = np.stack([right, down, fwd], axis=0)  # world-to-camera rows
    trans = -rot @ eye
    f = 0.5 * height / np.tan(np.deg2rad(fov_y_deg) / 2.0)
    return Camera(
        fx=f, fy=f, cx=width / 2.0, cy=height / 2.0,
        width=width, height=height, rotation=rot, translation=trans,
        near=near, far=far,
    )
