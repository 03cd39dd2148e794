"""Command-line driver for the avatar engine.

Subcommands mirror the pipeline: generate a template, pretrain or train
the canonical field, initialize and train the animatable avatar, then
render, animate, edit, or serve the result.  Every command exits 0 on
success, 2 on usage errors, 3 on unreadable or malformed input files,
and 4 on runtime failures, with a one-line diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .body import Pose, load_template, save_template
from .config import EngineConfig, load_config
from .field import load_field, pretrain, save_field
from .gaussians import load_avatar, save_avatar
from .mannequin import make_mannequin, preset_pose
from .motions import BUILTIN_MOTIONS, pose_from_dict, resolve_motion
from .rigging import apply_shape_edit, deform_from_avatar
from .sampling import orbit_camera
from .service import Session, render_frame, render_skeleton_frame, serve
from .trainer import (build_camera_sampler, init_stage2, make_field,
                      train_stage1, train_stage2, write_training_log)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


class CliError(Exception):
    """Failure with a chosen exit code and a one-line message."""

    def __init__(self, exit_code: int, message: str):
        super().__init__(message)
        self.exit_code = exit_code
        self.message = message


def _load(loader, path, what: str):
    """Run a file loader, mapping any failure to a data-format exit."""
    try:
        return loader(path)
    except FileNotFoundError:
        raise CliError(EXIT_DATA, f"{what} file not found: {path}")
    except (ValueError, OSError, KeyError) as exc:
        raise CliError(EXIT_DATA, f"bad {what} file {path}: {exc}")


def _config(args) -> EngineConfig:
    if getattr(args, "config", None) is None:
        return EngineConfig()
    return _load(load_config, args.config, "config")


def _pose_for(args, template) -> Pose:
    if getattr(args, "pose_file", None) is not None:
        data = _load(lambda p: json.load(open(p, encoding="utf-8")),
                     args.pose_file, "pose")
        try:
            return pose_from_dict(data, n_joints=template.n_joints)
        except ValueError as exc:
            raise CliError(EXIT_DATA, f"bad pose file {args.pose_file}: {exc}")
    if getattr(args, "preset", None) is not None:
        try:
            return preset_pose(args.preset, template.n_joints)
        except ValueError as exc:
            raise CliError(EXIT_DATA, str(exc))
    return Pose.identity(template.n_joints)


def _camera_for(args, template):
    return orbit_camera(template, azimuth_deg=args.az, polar_deg=args.el,
                        radius=args.r, fov_y_deg=args.fov,
                        resolution=args.resolution)


def _add_camera_flags(parser, resolution: int = 512):
    parser.add_argument("--az", type=float, default=0.0,
                        help="azimuth in degrees (default 0)")
    parser.add_argument("--el", type=float, default=90.0,
                        help="polar angle in degrees, 90 = equator (default 90)")
    parser.add_argument("--r", type=float, default=1.8,
                        help="orbit radius (default 1.8)")
    parser.add_argument("--fov", type=float, default=55.0,
                        help="vertical field of view in degrees (default 55)")
    parser.add_argument("--resolution", type=int, default=resolution,
                        help=f"square frame size in pixels (default {resolution})")


def _add_pose_flags(parser):
    group = parser.add_mutually_exclusive_group()
    group.add_argument("--pose-file", help="JSON pose record")
    group.add_argument("--preset", help="named pose preset (a, t, y, stride)")


def _delta_vector(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise argparse.ArgumentTypeError(
            "delta must be comma-separated numbers, e.g. '0.5,0,0,0'")


# -- subcommand bodies -------------------------------------------------------


def _cmd_gen_template(args) -> int:
    template = make_mannequin(seed=args.seed)
    save_template(args.out, template)
    print(f"wrote {args.out} ({template.n_vertices} vertices, "
          f"{template.n_joints} joints)")
    return EXIT_OK


def _cmd_pretrain(args) -> int:
    template = _load(load_template, args.template, "template")
    config = _config(args)
    config.validate()
    field = make_field(config, template)
    pose = preset_pose(config.pose.canonical_name, template.n_joints)
    pt = config.pretrain
    records = pretrain(field, template, pose, pt.steps, config.seed,
                       resolution=pt.resolution, n_rays=pt.n_rays, lr=pt.lr,
                       lambda_depth=pt.lambda_depth,
                       sampler=build_camera_sampler(config))
    save_field(args.out, field)
    last = records[-1]["loss"] if records else float("nan")
    print(f"wrote {args.out} after {pt.steps} pretraining steps "
          f"(final loss {last:.6f})")
    return EXIT_OK


def _cmd_train_canonical(args) -> int:
    template = _load(load_template, args.template, "template")
    config = _config(args)
    out_dir = Path(args.out_dir) if args.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    field, records = train_stage1(config, template, out_dir=out_dir)
    save_field(args.out, field)
    if out_dir:
        write_training_log(records, out_dir / "train_log.ndjson")
    print(f"wrote {args.out} after {config.stage1.steps} distillation steps")
    return EXIT_OK


def _cmd_init_avatar(args) -> int:
    template = _load(load_template, args.template, "template")
    field = _load(load_field, args.field, "field")
    config = _config(args)
    config.validate()
    avatar = init_stage2(field, template, config)
    save_avatar(args.out, avatar)
    print(f"wrote {args.out} ({len(avatar.gaussians)} members: "
          f"{avatar.n_unconstrained} unconstrained, {avatar.n_bound} bound)")
    return EXIT_OK


def _cmd_train_animatable(args) -> int:
    template = _load(load_template, args.template, "template")
    avatar = _load(load_avatar, args.avatar, "avatar")
    config = _config(args)
    out_dir = Path(args.out_dir) if args.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    avatar, _, records = train_stage2(config, avatar, template,
                                      out_dir=out_dir)
    save_avatar(args.out, avatar)
    if out_dir:
        write_training_log(records, out_dir / "train_log.ndjson")
    print(f"wrote {args.out} after {config.stage2.steps} animatable steps")
    return EXIT_OK


def _cmd_render(args) -> int:
    template = _load(load_template, args.template, "template")
    avatar = _load(load_avatar, args.avatar, "avatar")
    pose = _pose_for(args, template)
    cam = _camera_for(args, template)
    png = render_frame(avatar, template, pose, cam,
                       deform=deform_from_avatar(avatar))
    Path(args.out).write_bytes(png)
    print(f"wrote {args.out} ({args.resolution}x{args.resolution})")
    return EXIT_OK


def _cmd_animate(args) -> int:
    template = _load(load_template, args.template, "template")
    avatar = _load(load_avatar, args.avatar, "avatar")
    try:
        frames = resolve_motion(args.motion, n_joints=template.n_joints)
    except ValueError as exc:
        raise CliError(EXIT_DATA, str(exc))
    deform = deform_from_avatar(avatar)
    cam = _camera_for(args, template)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    per_frame_ms = []
    start = time.perf_counter()
    for k, frame in enumerate(frames):
        t0 = time.perf_counter()
        png = render_frame(avatar, template, frame.pose, cam, deform=deform)
        (out_dir / f"frame_{k:05d}.png").write_bytes(png)
        per_frame_ms.append(1000.0 * (time.perf_counter() - t0))
    total_ms = 1000.0 * (time.perf_counter() - start)
    report = {
        "frames": len(frames),
        "resolution": args.resolution,
        "total_ms": total_ms,
        "mean_ms": total_ms / len(frames),
        "per_frame_ms": per_frame_ms,
    }
    with open(out_dir / "timing.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    print(f"wrote {len(frames)} frames to {out_dir} "
          f"({report['mean_ms']:.1f} ms/frame)")
    return EXIT_OK


def _cmd_edit_shape(args) -> int:
    template = _load(load_template, args.template, "template")
    avatar = _load(load_avatar, args.avatar, "avatar")
    n_basis = template.shape_basis.shape[2]
    delta = args.delta
    if delta.shape[0] > n_basis:
        raise CliError(EXIT_DATA, f"delta has {delta.shape[0]} coefficients, "
                                  f"template basis has {n_basis}")
    full = np.zeros(n_basis)
    full[:delta.shape[0]] = delta
    try:
        edited = apply_shape_edit(avatar, template, full)
    except ValueError as exc:
        raise CliError(EXIT_DATA, str(exc))
    # fresh provenance stamp; content determinism is judged with it excluded
    stamp = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    save_avatar(args.out, edited, timestamp=stamp)
    print(f"wrote {args.out} (delta {np.array2string(full, precision=3)})")
    return EXIT_OK


def _cmd_skeleton(args) -> int:
    template = _load(load_template, args.template, "template")
    pose = _pose_for(args, template)
    cam = _camera_for(args, template)
    Path(args.out).write_bytes(render_skeleton_frame(template, pose, cam))
    print(f"wrote {args.out} ({args.resolution}x{args.resolution})")
    return EXIT_OK


def _cmd_serve(args) -> int:
    template = _load(load_template, args.template, "template")
    avatar = _load(load_avatar, args.avatar, "avatar")
    session = Session(avatar, template, resolution=args.resolution)
    serve(session, bind=args.bind, port=args.port, static_dir=args.static)
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avatarforge",
        description="animatable Gaussian avatar engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-template",
                       help="emit the procedural mannequin template")
    p.add_argument("--out", required=True, help="output .abt path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen_template)

    p = sub.add_parser("pretrain",
                       help="fit the canonical field to template silhouettes")
    p.add_argument("--template", required=True)
    p.add_argument("--config", help="TOML config (defaults apply if omitted)")
    p.add_argument("--out", required=True, help="output .nfck path")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("train-canonical",
                       help="full first-stage training of the canonical field")
    p.add_argument("--template", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="output .nfck path")
    p.add_argument("--out-dir", help="checkpoint and log directory")
    p.set_defaults(func=_cmd_train_canonical)

    p = sub.add_parser("init-avatar",
                       help="seed the hybrid avatar from a trained field")
    p.add_argument("--template", required=True)
    p.add_argument("--field", required=True, help="trained .nfck field")
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="output .hga path")
    p.set_defaults(func=_cmd_init_avatar)

    p = sub.add_parser("train-animatable",
                       help="second-stage training of the posed avatar")
    p.add_argument("--template", required=True)
    p.add_argument("--avatar", required=True, help="initialized .hga avatar")
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="output .hga path")
    p.add_argument("--out-dir", help="checkpoint and log directory")
    p.set_defaults(func=_cmd_train_animatable)

    p = sub.add_parser("render", help="render one posed view to PNG")
    p.add_argument("--template", required=True)
    p.add_argument("--avatar", required=True)
    p.add_argument("--out", required=True, help="output .png path")
    _add_pose_flags(p)
    _add_camera_flags(p)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("animate",
                       help="render a motion clip to a PNG sequence")
    p.add_argument("--template", required=True)
    p.add_argument("--avatar", required=True)
    p.add_argument("--motion", required=True,
                   help="built-in clip (%s) or a motion JSON file"
                        % ", ".join(sorted(BUILTIN_MOTIONS)))
    p.add_argument("--out-dir", required=True, help="frame output directory")
    _add_camera_flags(p)
    p.set_defaults(func=_cmd_animate)

    p = sub.add_parser("edit-shape",
                       help="apply a shape-basis delta and save a new avatar")
    p.add_argument("--template", required=True)
    p.add_argument("--avatar", required=True)
    p.add_argument("--delta", required=True, type=_delta_vector,
                   help="comma-separated coefficients, e.g. '0.5,0,0,0'")
    p.add_argument("--out", required=True, help="output .hga path")
    p.set_defaults(func=_cmd_edit_shape)

    p = sub.add_parser("skeleton",
                       help="render the pose-conditioning skeleton to PNG")
    p.add_argument("--template", required=True)
    p.add_argument("--out", required=True, help="output .png path")
    _add_pose_flags(p)
    _add_camera_flags(p)
    p.set_defaults(func=_cmd_skeleton)

    p = sub.add_parser("serve", help="serve the interactive session over HTTP")
    p.add_argument("--template", required=True)
    p.add_argument("--avatar", required=True)
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--bind", default="127.0.0.1")
    p.add_argument("--resolution", type=int, default=512)
    p.add_argument("--static", help="directory with the browser UI bundle")
    p.set_defaults(func=_cmd_serve)

    return parser


def cli(argv=None) -> int:
    """Parse and run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse already printed usage; -h exits 0, errors exit 2
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc.message}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
