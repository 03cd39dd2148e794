"""Camera and pose sampling policies for avatar training.

Cameras are drawn in spherical coordinates around the posed body (or its
face under the focus branch); poses follow a two-phase curriculum that
starts from named canonical poses and moves to seeded random
articulation with per-joint-group magnitudes clamped to joint limits.
All draws consume a caller-provided generator in a fixed order, so a
seed pins the whole sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .body import BodyTemplate, Pose, lbs_transform
from .camera import Camera, look_at_camera
from .rotations import quat_exp


def _spherical_dir(polar_rad: float, azimuth_rad: float) -> np.ndarray:
    s = np.sin(polar_rad)
    return np.array([s * np.cos(azimuth_rad), np.cos(polar_rad), s * np.sin(azimuth_rad)])


@dataclass
class CameraSampler:
    """Spherical camera sampler with optional face focus and target jitter.

    Ranges follow the training recipe: radius in length units, azimuth in
    degrees, elevation as a polar angle from the +y axis (90 = equator),
    vertical FoV in degrees.
    """

    radius_range: tuple = (1.0, 2.0)
    azimuth_range: tuple = (0.0, 360.0)
    elevation_range: tuple = (60.0, 120.0)
    fov_range: tuple = (40.0, 70.0)
    face_focus_prob: float = 0.2
    horizontal_jitter: float = 0.05
    face_radius_scale: float = 0.4
    face_part: str = "face"

    def sample(self, rng: np.random.Generator, pose: Pose,
               template: BodyTemplate, resolution: int = 512) -> Camera:
        """Draw one camera. The generator is consumed in a fixed order
        (radius, azimuth, elevation, fov, focus, jitter) regardless of
        configuration, so toggling options never shifts later draws."""
        radius = rng.uniform(*self.radius_range)
        azimuth = np.deg2rad(rng.uniform(*self.azimuth_range))
        polar = np.deg2rad(rng.uniform(*self.elevation_range))
        fov = rng.uniform(*self.fov_range)
        focus_draw = rng.uniform()
        jitter = rng.uniform(-1.0, 1.0, size=2) * self.horizontal_jitter

        verts = lbs_transform(template, pose).vertices
        focused = focus_draw < self.face_focus_prob
        if focused:
            mask = template.part_vertex_mask(self.face_part)
            center = verts[mask].mean(axis=0)
            radius *= self.face_radius_scale
        else:
            center = 0.5 * (verts.min(axis=0) + verts.max(axis=0))

        eye = center + radius * _spherical_dir(polar, azimuth)
        target = center + np.array([jitter[0], 0.0, jitter[1]])
        return look_at_camera(eye, target, width=resolution, height=resolution,
                              fov_y_deg=fov)


DEFAULT_CANONICAL_POSES = ("a", "t", "y", "stride")

# joint-name substring -> (axis-angle std, angle limit), radians
DEFAULT_JOINT_MAGNITUDES = (
    (("pelvis", "spine"), 0.10, 0.25),
    (("neck", "head"), 0.15, 0.40),
    (("shoulder", "elbow"), 0.45, 1.20),
    (("hip", "knee"), 0.35, 0.90),
)
_FALLBACK_STD, _FALLBACK_LIMIT = 0.20, 0.60


def _joint_magnitudes(joint_names, table):
    stds = np.full(len(joint_names), _FALLBACK_STD)
    limits = np.full(len(joint_names), _FALLBACK_LIMIT)
    for i, name in enumerate(joint_names):
        for keys, std, limit in table:
            if any(k in name for k in keys):
                stds[i] = std
                limits[i] = limit
                break
    return stds, limits


@dataclass
class PoseSampler:
    """Curriculum pose sampler: canonical presets first, then random poses.

    The random phase draws per-joint rotation vectors from zero-mean
    Gaussians whose scale and clamp depend on the joint group, plus
    expression coefficients from a scaled standard Gaussian.
    `random_pose_draws` counts random-phase draws so curriculum gating
    is observable in tests.
    """

    joint_names: tuple
    canonical_fraction: float = 0.3
    canonical_poses: tuple = DEFAULT_CANONICAL_POSES
    magnitude_table: tuple = DEFAULT_JOINT_MAGNITUDES
    expression_scale: float = 1.0
    n_expression: int = 0
    pose_factory: object = None  # name -> Pose; defaults to mannequin presets
    random_pose_draws: int = field(default=0, compare=False)

    def __post_init__(self):
        self._stds, self._limits = _joint_magnitudes(self.joint_names, self.magnitude_table)
        if self.pose_factory is None:
            from .mannequin import preset_pose
            self.pose_factory = preset_pose

    def phase(self, step: int, total_steps: int) -> str:
        return "canonical" if step < self.canonical_fraction * total_steps else "random"

    def sample(self, rng: np.random.Generator, step: int, total_steps: int) -> tuple:
        """Draw the pose for `step`; returns (Pose, phase name)."""
        ph = self.phase(step, total_steps)
        if ph == "canonical":
            name = self.canonical_poses[rng.integers(len(self.canonical_poses))]
            return self.pose_factory(name), ph
        return self.random_pose(rng), ph

    def random_pose(self, rng: np.random.Generator) -> Pose:
        self.random_pose_draws += 1
        nj = len(self.joint_names)
        omega = rng.normal(0.0, 1.0, size=(nj, 3)) * self._stds[:, None]
        norms = np.linalg.norm(omega, axis=1)
        over = norms > self._limits
        omega[over] *= (self._limits[over] / norms[over])[:, None]
        pose = Pose.identity(nj)
        pose.joint_rotations = quat_exp(omega)
        if self.n_expression:
            pose.expression = rng.normal(0.0, self.expression_scale, self.n_expression)
        return pose


def ring_cameras(template: BodyTemplate, pose: Pose = None, n_views: int = 8,
                 radius: float = 1.8, polar_deg: float = 90.0,
                 fov_y_deg: float = 55.0, resolution: int = 128) -> list:
    """Evenly spaced azimuth ring around the posed body; held-out eval views."""
    if pose is None:
        pose = Pose.identity(template.n_joints)
    verts = lbs_transform(template, pose).vertices
    center = 0.5 * (verts.min(axis=0) + verts.max(axis=0))
    cams = []
    for k in range(n_views):
        az = 2.0 * np.pi * k / n_views
        eye = center + radius * _spherical_dir(np.deg2rad(polar_deg), az)
        cams.append(look_at_camera(eye, center, width=resolution,
                                   height=resolution, fov_y_deg=fov_y_deg))
    return cams


def orbit_camera(template: BodyTemplate, azimuth_deg: float = 0.0,
                 polar_deg: float = 90.0, radius: float = 1.8,
                 fov_y_deg: float = 55.0, resolution: int = 512) -> "Camera":
    """Single spherical view aimed at the rest body's bounding-box center.

    The target is fixed to the canonical body (not the current pose) so an
    orbiting viewer does not drift while the avatar animates.
    """
    lo, hi = template.bounds()
    center = 0.5 * (lo + hi)
    eye = center + radius * _spherical_dir(np.deg2rad(polar_deg),
                                           np.deg2rad(azimuth_deg))
    return look_at_camera(eye, center, width=resolution, height=resolution,
                          fov_y_deg=fov_y_deg)
