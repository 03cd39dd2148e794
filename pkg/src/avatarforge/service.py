"""Live avatar session plus the local HTTP API that drives it.

One process hosts one :class:`Session`: a trained avatar, its template,
the current pose, and the current shape edit.  Mutations (pose updates,
shape edits, reset) are serialized by a lock and bump a version counter;
frame renders snapshot the session state under that lock and render
outside it, so a frame is always a consistent (avatar, pose) pair and
carries the version it rendered in an ``X-State-Version`` header.

The HTTP layer is a thin JSON/PNG facade over the session.  The CLI
``render`` path and ``GET /api/frame`` share :func:`render_frame`, so
identical (avatar, pose, camera) inputs produce byte-identical PNGs
whichever door they come through.
"""

from __future__ import annotations

import json
import mimetypes
import os
import sys
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlsplit

import numpy as np

from .body import BodyTemplate, Pose
from .camera import Camera
from .gaussians import HybridAvatar
from .guidance import GRAY_LEVEL
from .images import png_bytes
from .mannequin import preset_pose
from .motions import BUILTIN_MOTIONS
from .rigging import DeformNet, apply_shape_edit, articulate, deform_from_avatar
from .sampling import orbit_camera
from .skeleton import render_skeleton
from .splat import RendererConfig, render

# Frames render over the same neutral gray the trainer used as background,
# so a trained avatar blends instead of floating on black.
FRAME_BACKGROUND = (GRAY_LEVEL, GRAY_LEVEL, GRAY_LEVEL)

_POSE_KEYS = ("preset", "joints", "joint_rotations", "global_rotation",
              "global_translation", "shape", "expression")
_MAX_BODY_BYTES = 4 << 20

# Query-parameter bounds for /api/frame and /api/skeleton.
_PARAM_RANGES = {
    "el": (1.0, 179.0),
    "r": (0.1, 100.0),
    "fov": (10.0, 170.0),
}
_PARAM_DEFAULTS = {"az": 0.0, "el": 90.0, "r": 1.8, "fov": 55.0}


class ServiceError(Exception):
    """Client-visible failure: HTTP status plus a machine-readable code."""

    def __init__(self, code: str, message: str, status: int = 400):
        super().__init__(message)
        self.code = code
        self.message = message
        self.status = status


def render_frame(avatar: HybridAvatar, template: BodyTemplate, pose: Pose,
                 camera: Camera, deform: DeformNet | None = None) -> bytes:
    """Articulate and render one view; PNG bytes."""
    posed = articulate(avatar, template, pose, deform=deform)
    out = render(posed, camera, RendererConfig(background=FRAME_BACKGROUND))
    return png_bytes(out.color)


def render_skeleton_frame(template: BodyTemplate, pose: Pose,
                          camera: Camera) -> bytes:
    """Skeleton conditioning image for the same view; PNG bytes."""
    return png_bytes(render_skeleton(template, pose, camera).pixels)


def _float_array(value, name: str) -> np.ndarray:
    try:
        return np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ServiceError("bad_field",
                           f"'{name}' must be numeric") from exc


def _finite_vector(value, length: int, name: str) -> np.ndarray:
    arr = _float_array(value, name)
    if arr.shape != (length,) or not np.all(np.isfinite(arr)):
        raise ServiceError("bad_field", f"'{name}' must be a list of "
                                        f"{length} finite numbers")
    return arr


def _unit_quat(value, name: str) -> np.ndarray:
    q = _finite_vector(value, 4, name)
    norm = float(np.linalg.norm(q))
    if abs(norm - 1.0) > 1e-6:
        raise ServiceError("bad_field", f"'{name}' must be a unit quaternion")
    return q / norm


class Session:
    """One live avatar: current pose, current shape edit, version counter.

    A process hosts a single session.  All state transitions run under one
    lock (single writer); readers snapshot the state under the same lock
    and render from the snapshot, so concurrent renders never observe a
    half-applied mutation.
    """

    def __init__(self, avatar: HybridAvatar, template: BodyTemplate,
                 resolution: int = 512):
        self.template = template
        self.resolution = int(resolution)
        self._canonical = avatar
        self._canonical_deform = deform_from_avatar(avatar)
        self._lock = threading.Lock()
        self._avatar = avatar
        self._deform = self._canonical_deform
        self._pose = Pose.identity(template.n_joints)
        self._delta = np.zeros(template.shape_basis.shape[2])
        self._version = 0

    @property
    def version(self) -> int:
        with self._lock:
            return self._version

    def meta(self) -> dict:
        """Immutable facts plus the current version; feeds GET /api/meta."""
        with self._lock:
            avatar, version = self._avatar, self._version
        return {
            "version": version,
            "resolution": self.resolution,
            "counts": {
                "total": len(avatar.gaussians),
                "unconstrained": avatar.n_unconstrained,
                "bound": avatar.n_bound,
            },
            "n_shape": self.template.n_shape,
            "n_expression": self.template.n_expression,
            "n_basis": int(self.template.shape_basis.shape[2]),
            "joint_names": self.template.joint_names(),
            "part_names": list(self._canonical.part_names),
            "motions": sorted(BUILTIN_MOTIONS),
        }

    def set_pose(self, data) -> int:
        """Merge a partial pose update; unknown or malformed fields are errors.

        ``preset`` (if given) replaces the whole pose first; the remaining
        fields then overwrite their slots.  ``joints`` merges individual
        joints by name into whatever the base pose holds.
        """
        if not isinstance(data, dict):
            raise ServiceError("bad_field", "pose update must be a JSON object")
        unknown = set(data) - set(_POSE_KEYS)
        if unknown:
            raise ServiceError("bad_field",
                               f"unknown pose field '{sorted(unknown)[0]}'")
        names = self.template.joint_names()
        with self._lock:
            if "preset" in data:
                try:
                    pose = preset_pose(str(data["preset"]), self.template.n_joints)
                except ValueError as exc:
                    raise ServiceError("bad_field", str(exc)) from exc
            else:
                pose = self._pose.copy()
            if "joint_rotations" in data:
                rots = data["joint_rotations"]
                if not isinstance(rots, list) or len(rots) != len(names):
                    raise ServiceError(
                        "bad_field", f"'joint_rotations' must list "
                                     f"{len(names)} quaternions")
                pose.joint_rotations = np.stack(
                    [_unit_quat(q, f"joint_rotations[{i}]")
                     for i, q in enumerate(rots)])
            if "joints" in data:
                joints = data["joints"]
                if not isinstance(joints, dict):
                    raise ServiceError("bad_field",
                                       "'joints' must map joint names to "
                                       "quaternions")
                for name, quat in joints.items():
                    if name not in names:
                        raise ServiceError("bad_field",
                                           f"unknown joint '{name}'")
                    pose.joint_rotations[names.index(name)] = \
                        _unit_quat(quat, f"joints.{name}")
            if "global_rotation" in data:
                pose.global_rotation = _unit_quat(data["global_rotation"],
                                                  "global_rotation")
            if "global_translation" in data:
                pose.global_translation = _finite_vector(
                    data["global_translation"], 3, "global_translation")
            if "shape" in data:
                pose.shape = self._coeffs(data["shape"],
                                          self.template.n_shape, "shape")
            if "expression" in data:
                pose.expression = self._coeffs(data["expression"],
                                               self.template.n_expression,
                                               "expression")
            pose.validate()
            self._pose = pose
            self._version += 1
            return self._version

    @staticmethod
    def _coeffs(value, limit: int, name: str) -> np.ndarray:
        arr = _float_array(value, name)
        if arr.ndim != 1 or arr.shape[0] > limit \
                or not np.all(np.isfinite(arr)):
            raise ServiceError("bad_field",
                               f"'{name}' must be at most {limit} finite "
                               "numbers")
        return arr

    def set_shape(self, data) -> int:
        """Apply a shape-basis delta relative to the canonical avatar.

        Idempotent in the delta: posting the same vector twice lands on the
        same state, and a zero delta restores the canonical geometry.
        """
        if not isinstance(data, dict) or "delta" not in data:
            raise ServiceError("bad_field",
                               "shape update must be an object with a "
                               "'delta' array")
        n_basis = int(self.template.shape_basis.shape[2])
        delta = self._coeffs(data["delta"], n_basis, "delta")
        full = np.zeros(n_basis)
        full[:delta.shape[0]] = delta
        edited = apply_shape_edit(self._canonical, self.template, full)
        with self._lock:
            self._avatar = edited
            self._deform = deform_from_avatar(edited)
            self._delta = full
            self._version += 1
            return self._version

    def reset(self) -> int:
        """Back to the loaded state: canonical geometry, identity pose."""
        with self._lock:
            self._avatar = self._canonical
            self._deform = self._canonical_deform
            self._pose = Pose.identity(self.template.n_joints)
            self._delta = np.zeros_like(self._delta)
            self._version += 1
            return self._version

    def frame(self, azimuth_deg: float = 0.0, polar_deg: float = 90.0,
              radius: float = 1.8, fov_y_deg: float = 55.0,
              skeleton: bool = False) -> tuple[bytes, int]:
        """Render the current state from an orbit view; (PNG bytes, version).

        The state snapshot happens under the lock; the render itself runs
        outside it, so slow frames never block pose updates.
        """
        with self._lock:
            avatar, deform = self._avatar, self._deform
            pose, version = self._pose, self._version
        cam = orbit_camera(self.template, azimuth_deg, polar_deg, radius,
                           fov_y_deg, self.resolution)
        if skeleton:
            return render_skeleton_frame(self.template, pose, cam), version
        return render_frame(avatar, self.template, pose, cam, deform), version


def _frame_params(query: dict) -> dict:
    out = dict(_PARAM_DEFAULTS)
    for key, values in query.items():
        if key not in _PARAM_DEFAULTS:
            raise ServiceError("bad_query", f"unknown query parameter '{key}'")
        try:
            val = float(values[-1])
        except ValueError as exc:
            raise ServiceError("bad_query",
                               f"'{key}' must be a number") from exc
        if not np.isfinite(val):
            raise ServiceError("bad_query", f"'{key}' must be finite")
        lo, hi = _PARAM_RANGES.get(key, (-np.inf, np.inf))
        if not lo <= val <= hi:
            raise ServiceError("bad_query",
                               f"'{key}' must be in [{lo}, {hi}]")
        out[key] = val
    return out


class AvatarServer(ThreadingHTTPServer):
    """Threaded HTTP server bound to one session."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, session: Session, static_dir=None,
                 quiet: bool = True):
        super().__init__(address, _Handler)
        self.session = session
        self.static_dir = os.path.realpath(static_dir) if static_dir else None
        self.quiet = quiet


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    _GET_ROUTES = ("/api/meta", "/api/frame", "/api/skeleton")
    _POST_ROUTES = ("/api/pose", "/api/shape", "/api/reset")

    @property
    def session(self) -> Session:
        return self.server.session

    def log_message(self, fmt, *args):
        if not self.server.quiet:
            sys.stderr.write("%s - %s\n" % (self.address_string(), fmt % args))

    # -- responses ---------------------------------------------------------

    def _send(self, status: int, content_type: str, payload: bytes,
              version: int | None = None) -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(payload)))
        self.send_header("Cache-Control", "no-store")
        if version is not None:
            self.send_header("X-State-Version", str(version))
        self.end_headers()
        self.wfile.write(payload)

    def _send_json(self, obj, status: int = 200,
                   version: int | None = None) -> None:
        payload = json.dumps(obj, sort_keys=True).encode("utf-8")
        self._send(status, "application/json; charset=utf-8", payload,
                   version)

    def _no_content(self, version: int) -> None:
        self.send_response(204)
        self.send_header("Cache-Control", "no-store")
        self.send_header("X-State-Version", str(version))
        self.end_headers()

    def _error(self, status: int, code: str, message: str) -> None:
        self._send_json({"error": {"code": code, "message": message}},
                        status=status)

    def _drain_body(self) -> bytes:
        """Consume the declared request body up front.

        Keep-alive connections desync if any response goes out while body
        bytes sit unread, so every POST drains first and parses later.
        """
        try:
            length = int(self.headers.get("Content-Length", "0") or "0")
        except ValueError:
            return b""
        remaining = max(0, length)
        chunks = []
        while remaining > 0:
            chunk = self.rfile.read(min(remaining, 1 << 16))
            if not chunk:
                break
            remaining -= len(chunk)
            chunks.append(chunk)
        return b"".join(chunks)

    def _json_body(self) -> dict:
        raw = self._body
        if not 0 < len(raw) <= _MAX_BODY_BYTES:
            raise ServiceError("bad_json", "request body required")
        try:
            return json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ServiceError("bad_json",
                               f"body is not valid JSON: {exc}") from exc

    # -- routing -----------------------------------------------------------

    def do_GET(self):
        url = urlsplit(self.path)
        try:
            if url.path == "/api/meta":
                meta = self.session.meta()
                self._send_json(meta, version=meta["version"])
            elif url.path in ("/api/frame", "/api/skeleton"):
                params = _frame_params(parse_qs(url.query))
                png, version = self.session.frame(
                    azimuth_deg=params["az"], polar_deg=params["el"],
                    radius=params["r"], fov_y_deg=params["fov"],
                    skeleton=url.path.endswith("skeleton"))
                self._send(200, "image/png", png, version)
            elif url.path in self._POST_ROUTES:
                self._error(405, "bad_method", "use POST for this route")
            elif url.path.startswith("/api/"):
                self._error(404, "not_found", f"unknown route {url.path}")
            else:
                self._static(url.path)
        except ServiceError as exc:
            self._error(exc.status, exc.code, exc.message)
        except Exception as exc:  # pragma: no cover - defensive
            sys.stderr.write(f"error: {exc}\n")
            self._error(500, "internal", "internal error")

    def do_POST(self):
        path = urlsplit(self.path).path
        self._body = self._drain_body()
        try:
            if path == "/api/pose":
                self._no_content(self.session.set_pose(self._json_body()))
            elif path == "/api/shape":
                self._no_content(self.session.set_shape(self._json_body()))
            elif path == "/api/reset":
                self._no_content(self.session.reset())
            elif path in self._GET_ROUTES:
                self._error(405, "bad_method", "use GET for this route")
            else:
                self._error(404, "not_found", f"unknown route {path}")
        except ServiceError as exc:
            self._error(exc.status, exc.code, exc.message)
        except Exception as exc:  # pragma: no cover - defensive
            sys.stderr.write(f"error: {exc}\n")
            self._error(500, "internal", "internal error")

    # -- static bundle -----------------------------------------------------

    def _static(self, path: str) -> None:
        root = self.server.static_dir
        if root is None:
            if path == "/":
                self._send(200, "text/plain; charset=utf-8",
                           b"avatar service: API under /api/\n")
                return
            raise ServiceError("not_found", f"unknown route {path}",
                               status=404)
        rel = path.lstrip("/") or "index.html"
        full = os.path.realpath(os.path.join(root, rel))
        # containment check: never serve outside the bundle directory
        if not full.startswith(root + os.sep) and full != root:
            raise ServiceError("not_found", "unknown route", status=404)
        if os.path.isdir(full):
            full = os.path.join(full, "index.html")
        if not os.path.isfile(full):
            raise ServiceError("not_found", f"unknown route {path}",
                               status=404)
        ctype = mimetypes.guess_type(full)[0] or "application/octet-stream"
        with open(full, "rb") as fh:
            self._send(200, ctype, fh.read())


def make_server(session: Session, bind: str = "127.0.0.1", port: int = 8000,
                static_dir=None, quiet: bool = True) -> AvatarServer:
    """Build (but do not start) the HTTP server; port 0 picks a free port."""
    return AvatarServer((bind, port), session, static_dir=static_dir,
                        quiet=quiet)


def serve(session: Session, bind: str = "127.0.0.1", port: int = 8000,
          static_dir=None, quiet: bool = False) -> None:
    """Serve until interrupted; prints the bound address on startup."""
    server = make_server(session, bind, port, static_dir, quiet=quiet)
    host, bound_port = server.server_address[:2]
    print(f"serving on http://{host}:{bound_port}/ "
          f"({len(session.template.joint_names())} joints, "
          f"{session.resolution}px frames)")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
