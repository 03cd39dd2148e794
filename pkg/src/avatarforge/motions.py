"""Timed pose sequences: JSON motion files and procedural test clips.

A motion file is a JSON array of frame records.  Each record is a pose
(the same fields as :class:`avatarforge.body.Pose`, nested lists of
floats) plus a ``time`` stamp in seconds.  Timestamps must be finite and
strictly increasing.  Fields other than ``time`` are optional and fall
back to the identity pose, so a sparse clip only has to spell out the
joints it moves.

Two procedural clips ship with the engine ("wave" and "walk-cycle").
They are pure functions of the frame index, so repeated generation is
bit-identical; tests and the demo service rely on that.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .body import Pose
from .mannequin import (
    L_HIP,
    L_KNEE,
    L_SHOULDER,
    R_ELBOW,
    R_HIP,
    R_KNEE,
    R_SHOULDER,
)
from .rotations import quat_exp

_POSE_FIELDS = ("joint_rotations", "global_rotation", "global_translation",
                "shape", "expression")


@dataclass
class MotionFrame:
    """One playback frame: a pose and the time (seconds) it applies."""

    time: float
    pose: Pose


def pose_to_dict(pose: Pose) -> dict:
    """Plain-JSON form of a pose (nested float lists, f64 precision)."""
    return {
        "joint_rotations": pose.joint_rotations.tolist(),
        "global_rotation": pose.global_rotation.tolist(),
        "global_translation": pose.global_translation.tolist(),
        "shape": pose.shape.tolist(),
        "expression": pose.expression.tolist(),
    }


def _as_array(value, shape: tuple, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != shape:
        raise ValueError(f"pose field '{name}' must have shape {list(shape)}, "
                         f"got {list(arr.shape)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"pose field '{name}' contains non-finite values")
    return arr


def pose_from_dict(data: dict, n_joints: int | None = None) -> Pose:
    """Parse a pose record; unknown keys and malformed fields are errors.

    Quaternions are checked for unit norm (1e-6) rather than silently
    renormalized, so a clip authored with drifting quats fails loudly.
    """
    if not isinstance(data, dict):
        raise ValueError("pose record must be a JSON object")
    unknown = set(data) - set(_POSE_FIELDS)
    if unknown:
        raise ValueError(f"unknown pose field '{sorted(unknown)[0]}'")
    if "joint_rotations" in data:
        rots = np.asarray(data["joint_rotations"], dtype=np.float64)
        if rots.ndim != 2 or rots.shape[1] != 4:
            raise ValueError("pose field 'joint_rotations' must be an "
                             "[n_joints, 4] array of quaternions")
        if n_joints is not None and rots.shape[0] != n_joints:
            raise ValueError(f"pose has {rots.shape[0]} joint rotations, "
                             f"expected {n_joints}")
        if not np.all(np.isfinite(rots)):
            raise ValueError("pose field 'joint_rotations' contains "
                             "non-finite values")
    elif n_joints is None:
        raise ValueError("pose record omits 'joint_rotations' and no joint "
                         "count was supplied")
    else:
        rots = Pose.identity(n_joints).joint_rotations

    pose = Pose(
        joint_rotations=rots,
        global_rotation=_as_array(data.get("global_rotation", (1.0, 0.0, 0.0, 0.0)),
                                  (4,), "global_rotation"),
        global_translation=_as_array(data.get("global_translation", (0.0, 0.0, 0.0)),
                                     (3,), "global_translation"),
        shape=np.asarray(data.get("shape", ()), dtype=np.float64),
        expression=np.asarray(data.get("expression", ()), dtype=np.float64),
    )
    for name in ("shape", "expression"):
        arr = getattr(pose, name)
        if arr.ndim != 1 or not np.all(np.isfinite(arr)):
            raise ValueError(f"pose field '{name}' must be a flat list of "
                             "finite numbers")
    norms = np.linalg.norm(pose.joint_rotations, axis=1)
    gnorm = np.linalg.norm(pose.global_rotation)
    if np.any(np.abs(norms - 1.0) > 1e-6) or abs(gnorm - 1.0) > 1e-6:
        raise ValueError("pose quaternions must be unit length")
    return pose


def save_motion(path, frames: list[MotionFrame]) -> None:
    """Write frames as a JSON array of timestamped pose records."""
    records = []
    for frame in frames:
        rec = {"time": float(frame.time)}
        rec.update(pose_to_dict(frame.pose))
        records.append(rec)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(records, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_motion(path, n_joints: int | None = None) -> list[MotionFrame]:
    """Read a motion file; raises ValueError on any malformed record."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            records = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"motion file is not valid JSON: {exc}") from exc
    if not isinstance(records, list) or not records:
        raise ValueError("motion file must be a non-empty JSON array of "
                         "frame records")
    frames = []
    last_time = -math.inf
    for i, rec in enumerate(records):
        if not isinstance(rec, dict) or "time" not in rec:
            raise ValueError(f"motion frame {i} must be an object with a "
                             "'time' stamp")
        time = rec["time"]
        if isinstance(time, bool) or not isinstance(time, (int, float)) \
                or not math.isfinite(time):
            raise ValueError(f"motion frame {i} has a non-numeric time stamp")
        if time <= last_time:
            raise ValueError(f"motion frame {i} time {time} is not strictly "
                             "increasing")
        last_time = float(time)
        body = {k: v for k, v in rec.items() if k != "time"}
        try:
            pose = pose_from_dict(body, n_joints=n_joints)
        except ValueError as exc:
            raise ValueError(f"motion frame {i}: {exc}") from exc
        frames.append(MotionFrame(time=float(time), pose=pose))
    return frames


def _joint_quat(deg: float, axis: tuple) -> np.ndarray:
    return quat_exp(np.deg2rad(deg) * np.asarray(axis, dtype=np.float64))


def wave_motion(n_frames: int = 48, fps: float = 24.0,
                n_joints: int = 12) -> list[MotionFrame]:
    """Right arm raised, forearm oscillating; two full waves per clip."""
    frames = []
    for k in range(n_frames):
        phase = 2.0 * math.pi * 2.0 * k / n_frames
        pose = Pose.identity(n_joints)
        pose.joint_rotations[R_SHOULDER] = _joint_quat(-75.0, (0, 0, 1))
        pose.joint_rotations[R_ELBOW] = _joint_quat(
            -30.0 + 22.0 * math.sin(phase), (0, 0, 1))
        pose.joint_rotations[L_SHOULDER] = _joint_quat(12.0, (0, 0, 1))
        frames.append(MotionFrame(time=k / fps, pose=pose))
    return frames


def walk_cycle_motion(n_frames: int = 32, fps: float = 24.0,
                      n_joints: int = 12) -> list[MotionFrame]:
    """One gait cycle: antiphase hips, swing-phase knee flexion, arm swing."""
    frames = []
    for k in range(n_frames):
        phase = 2.0 * math.pi * k / n_frames
        swing = math.sin(phase)
        pose = Pose.identity(n_joints)
        pose.joint_rotations[L_HIP] = _joint_quat(26.0 * swing, (1, 0, 0))
        pose.joint_rotations[R_HIP] = _joint_quat(-26.0 * swing, (1, 0, 0))
        # knee bends only while its leg swings forward
        pose.joint_rotations[L_KNEE] = _joint_quat(
            -34.0 * max(0.0, math.sin(phase - 0.7)), (1, 0, 0))
        pose.joint_rotations[R_KNEE] = _joint_quat(
            -34.0 * max(0.0, math.sin(phase + math.pi - 0.7)), (1, 0, 0))
        pose.joint_rotations[L_SHOULDER] = _joint_quat(-14.0 * swing, (1, 0, 0))
        pose.joint_rotations[R_SHOULDER] = _joint_quat(14.0 * swing, (1, 0, 0))
        # vertical bob peaks twice per cycle, once per step
        bob = 0.012 * (1.0 - math.cos(2.0 * phase)) * 0.5
        pose.global_translation = np.array([0.0, bob, 0.0])
        frames.append(MotionFrame(time=k / fps, pose=pose))
    return frames


BUILTIN_MOTIONS = {
    "wave": wave_motion,
    "walk-cycle": walk_cycle_motion,
}


def builtin_motion(name: str, n_joints: int = 12) -> list[MotionFrame]:
    """Generate a built-in clip by name; unknown names list the options."""
    factory = BUILTIN_MOTIONS.get(name)
    if factory is None:
        known = ", ".join(sorted(BUILTIN_MOTIONS))
        raise ValueError(f"unknown motion '{name}' (built-ins: {known})")
    return factory(n_joints=n_joints)


def resolve_motion(spec: str, n_joints: int = 12) -> list[MotionFrame]:
    """Built-in clip name, or a path to a motion JSON file."""
    if spec in BUILTIN_MOTIONS:
        return builtin_motion(spec, n_joints=n_joints)
    if os.path.exists(spec):
        return load_motion(spec, n_joints=n_joints)
    known = ", ".join(sorted(BUILTIN_MOTIONS))
    raise ValueError(f"motion '{spec}' is neither a built-in ({known}) nor "
                     "an existing file")


def convert_smplx_sequence(path, fps: float | None = None) -> list[MotionFrame]:
    """Stub: convert an SMPL-X family capture export to a motion file.

    The mapping is mechanical but the capture formats carry many more
    joints than the procedural mannequin, so this converter documents the
    reduction and stops there:

    * per-joint axis-angle vectors map through the exponential map
      (``rotations.quat_exp``) to the unit quaternions used here;
    * the 55-joint body collapses onto the 12-joint rig by taking
      ``pelvis, spine1, neck, head, {l,r}_shoulder, {l,r}_elbow,
      {l,r}_hip, {l,r}_knee`` and pre-composing each dropped chain joint
      (spine2/spine3, collar bones) into its kept parent;
    * ``transl`` and ``global_orient`` map to the pose's global
      translation/rotation; ``betas`` truncate to the template's shape
      coefficient count, expression coefficients likewise;
    * frame k gets ``time = k / fps`` with fps read from the export when
      present.

    Implementing it needs an agreed container layout for the exports
    (npz key names differ across toolchains), which this engine does not
    pin down.
    """
    raise NotImplementedError(
        "capture-sequence conversion is a documented stub; see the "
        "docstring for the field mapping")
