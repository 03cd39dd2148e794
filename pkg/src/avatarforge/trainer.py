"""Two-stage avatar training: canonical field first, then animatable splats.

Stage 1 fits a radiance field under score-distillation gradients in one
fixed canonical pose, warm-started by silhouette/depth pretraining. Stage 2
converts the field into a hybrid Gaussian avatar (free members plus
mesh-bound hand and face members) and trains it across articulated poses
with the splat renderer.

Determinism contract: every random draw flows from ``config.seed`` through
fixed-order streams, written artifacts carry no wall-clock data, and all
gradient reductions are order-stable, so a repeated run reproduces
checkpoints and logs byte for byte.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .body import BodyTemplate, Pose, lbs_transform
from .config import EngineConfig, config_snapshot
from .field import (RadianceField, extract_points, geometry_loss, pretrain,
                    save_field, volume_render, volume_render_backward)
from .gaussians import GaussianSet, HybridAvatar, save_avatar
from .guidance import (GRAY_LEVEL, Condition, ExternalGuidance, OracleGuidance,
                       linear_schedule, mannequin_target_provider, sds_gradient)
from .images import psnr
from .mannequin import preset_pose
from .optim import Adam
from .rigging import (DeformNet, KnnSmoothingConfig, articulate,
                      articulate_backward, attach_deform, bind_to_mesh,
                      deform_from_avatar, init_lbs_weights, knn_smooth_lbs,
                      nearest_vertex_index)
from .rotations import normalize_quat
from .sampling import CameraSampler, PoseSampler
from .skeleton import render_skeleton
from .splat import RendererConfig, render, render_backward

# Step records share one schema across phases so log parsers stay simple;
# keys that do not apply to a phase are null.
LOG_KEYS = ("stage", "step", "t", "resolution", "pose_phase", "loss", "loss_geo")

# Decorrelates the Stage-2 noise stream from Stage 1 without a second seed.
_STAGE2_SEED_SALT = 0x9E3779B9


def _log_record(stage, step, loss, *, t=None, resolution=None,
                pose_phase=None, loss_geo=None, **extra):
    rec = {"stage": stage, "step": int(step), "t": t, "resolution": resolution,
           "pose_phase": pose_phase, "loss": float(loss), "loss_geo": loss_geo}
    rec.update(extra)
    return rec


def write_training_log(records, path) -> None:
    """Write step records as newline-delimited JSON, schema keys only."""
    with open(path, "w") as f:
        for rec in records:
            row = {k: rec.get(k) for k in LOG_KEYS}
            f.write(json.dumps(row, sort_keys=True) + "\n")


def resolution_schedule(step: int, total: int, start: int, end: int) -> int:
    """Progressive render resolution: power-of-two levels in equal spans.

    Monotone non-decreasing in ``step``; the last span always runs at
    ``end``.
    """
    levels = []
    r = start
    while r < end:
        levels.append(r)
        r *= 2
    levels.append(end)
    if total <= 0:
        return levels[-1]
    idx = min(int(step * len(levels) / total), len(levels) - 1)
    return levels[idx]


# ---------------------------------------------------------------------------
# Component builders


def make_field(config: EngineConfig, template: BodyTemplate) -> RadianceField:
    fm = config.field_model
    dtype = np.float32 if fm.dtype == "float32" else np.float64
    return RadianceField.for_template(template, pad=fm.pad, n_bands=fm.n_bands,
                                      hidden=fm.hidden, n_samples=fm.n_samples,
                                      seed=config.seed, dtype=dtype)


def build_guidance(config: EngineConfig, template: BodyTemplate):
    """Guidance named by the config; external servers apply their own
    classifier-free mixing, the local oracle applies ``cfg_scale`` itself."""
    gc = config.guidance
    if gc.kind == "oracle":
        return OracleGuidance(linear_schedule(),
                              mannequin_target_provider(
                                  template, seed=gc.texture_seed),
                              cfg_scale=gc.cfg_scale)
    return ExternalGuidance(gc.address)


def build_camera_sampler(config: EngineConfig) -> CameraSampler:
    cc = config.camera
    return CameraSampler(radius_range=cc.radius_range,
                         azimuth_range=cc.azimuth_range,
                         elevation_range=cc.elevation_range,
                         fov_range=cc.fov_range,
                         face_focus_prob=cc.face_focus_prob,
                         horizontal_jitter=cc.horizontal_jitter,
                         face_radius_scale=cc.face_radius_scale)


def build_pose_sampler(config: EngineConfig, template: BodyTemplate) -> PoseSampler:
    pc = config.pose
    return PoseSampler(joint_names=tuple(template.joint_names()),
                       canonical_fraction=pc.canonical_fraction,
                       canonical_poses=pc.canonical_poses,
                       expression_scale=pc.expression_scale,
                       n_expression=template.n_expression)


def make_deform(config: EngineConfig, template: BodyTemplate) -> DeformNet:
    s2 = config.stage2
    return DeformNet.for_template(template, pad=config.field_model.pad,
                                  n_bands=s2.deform_bands,
                                  hidden=s2.deform_hidden,
                                  output_scale=s2.deform_output_scale,
                                  seed=config.seed)


def _guidance_schedule(guidance):
    return getattr(guidance, "schedule", None) or linear_schedule()


def _gray(guidance) -> float:
    return float(getattr(guidance, "gray_level", GRAY_LEVEL))


def _geo_seed(seed: int, step: int) -> int:
    # Own stream for the geometry-loss point draws; never touches the
    # camera generator, so toggling lambda_geo cannot shift other draws.
    return ((seed + 1) * 1_000_003 + step) & 0x7FFFFFFF


def lr_decay_factor(step: int, total: int, decay: float) -> float:
    """Cosine ramp from 1 at step 0 down to ``decay`` at the last step.

    At decay = 1 the factor is the constant 1.0, leaving optimizer updates
    bitwise identical to an unscheduled run.
    """
    if decay == 1.0 or total <= 1:
        return 1.0
    c = 0.5 * (1.0 + math.cos(math.pi * step / (total - 1)))
    return decay + (1.0 - decay) * c


# ---------------------------------------------------------------------------
# Stage 1: canonical field


def train_stage1(config: EngineConfig, template: BodyTemplate, guidance=None,
                 *, field: RadianceField | None = None, out_dir=None):
    """Pretrain, then distill the canonical-pose field. Returns (field, records).

    Per step: sample a camera at the current progressive resolution, render
    the field, draw the canonical skeleton image from the same camera, and
    apply the distillation gradient plus ``lambda_geo`` times the part
    geometry gradient in one optimizer step.
    """
    config.validate()
    if guidance is None:
        guidance = build_guidance(config, template)
    if field is None:
        field = make_field(config, template)
    schedule = _guidance_schedule(guidance)
    s1 = config.stage1
    pt = config.pretrain
    canonical = preset_pose(config.pose.canonical_name, template.n_joints)
    background = (_gray(guidance),) * 3

    records = []
    pre = pretrain(field, template, canonical, pt.steps, config.seed,
                   resolution=pt.resolution, n_rays=pt.n_rays, lr=pt.lr,
                   lambda_depth=pt.lambda_depth,
                   sampler=build_camera_sampler(config))
    for rec in pre:
        records.append(_log_record(0, rec["step"], rec["loss"],
                                   resolution=pt.resolution,
                                   pose_phase="canonical"))

    sampler = build_camera_sampler(config)
    rng = np.random.default_rng([config.seed, 1])
    opt = Adam(field.params.shape, lr=s1.lr)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    for step in range(s1.steps):
        res = resolution_schedule(step, s1.steps, s1.resolution_start,
                                  s1.resolution_end)
        cam = sampler.sample(rng, canonical, template, resolution=res)
        out, cache = volume_render(field, cam, rng=rng, background=background,
                                   need_cache=True)
        skel = render_skeleton(template, canonical, cam)
        condition = Condition(camera=cam, pose=canonical, image=skel.pixels)

        def hook(grad_image):
            return volume_render_backward(field, cache, grad_color=grad_image)

        sds = sds_gradient(out.color, hook, schedule, guidance, condition,
                           seed=config.seed, call_index=step,
                           t_range=config.sds.t_range,
                           chain_xt=config.sds.chain_xt)
        grads = sds.grads
        loss_geo = None
        if s1.lambda_geo > 0.0:
            gl, geo_grads = geometry_loss(field, template, canonical,
                                          s1.geo_samples,
                                          _geo_seed(config.seed, step))
            grads = grads + s1.lambda_geo * geo_grads
            loss_geo = float(gl)
        opt.lr = s1.lr * lr_decay_factor(step, s1.steps, s1.lr_decay)
        opt.step(field.params, grads)
        records.append(_log_record(1, step, sds.residual_norm, t=sds.t,
                                   resolution=res, pose_phase="canonical",
                                   loss_geo=loss_geo, camera=cam,
                                   skeleton_camera=cam))
        if (out_dir is not None and s1.checkpoint_interval > 0
                and (step + 1) % s1.checkpoint_interval == 0):
            save_field(out_dir / f"stage1_{step + 1:06d}.nfck", field)
    return field, records


# ---------------------------------------------------------------------------
# Stage 2 initialization: field -> hybrid avatar


def init_stage2(field, template: BodyTemplate,
                config: EngineConfig) -> HybridAvatar:
    """Convert the canonical field into an initialized hybrid avatar.

    Free members sit at density-grid cells above threshold; hand and face
    members ride their part triangles. Colors and opacities of every member
    come from field queries at its canonical position; scales follow the
    mean distance to the 3 nearest extracted neighbors (isotropic), and
    rotations start at identity. Blend weights copy the nearest template
    vertex, then diffuse over extracted neighbors.
    """
    config.validate()
    s2 = config.stage2
    pts = extract_points(field, s2.grid_resolution, s2.density_threshold)
    if pts.shape[0] == 0:
        raise ValueError(
            "density extraction produced no points; lower "
            "stage2.density_threshold or check the trained field")
    # Stored positions are float32; query attributes at the stored values so
    # a later query at avatar positions reproduces them exactly.
    pts = pts.astype(np.float32)
    lo, hi = field.bounds
    cell = float(np.mean((np.asarray(hi) - np.asarray(lo)) / s2.grid_resolution))

    canonical = preset_pose(config.pose.canonical_name, template.n_joints)
    canonical_vertices = lbs_transform(template, canonical).vertices

    n_u = pts.shape[0]
    if n_u > 1:
        k = min(3, n_u - 1)
        dist, _ = cKDTree(pts).query(pts, k=k + 1)  # col 0 is self
        mean_dist = dist[:, 1:].mean(axis=1)
    else:
        mean_dist = np.full(n_u, cell)
    log_scale_u = np.repeat(np.log(mean_dist)[:, None], 3, axis=1)
    rot_u = np.zeros((n_u, 4))
    rot_u[:, 0] = 1.0

    positions = [pts]
    rotations = [rot_u]
    log_scales = [log_scale_u]
    binding_part, binding_face, binding_bary, binding_offset = [], [], [], []
    part_names = list(s2.bound_parts)
    for part_id, part in enumerate(part_names):
        binding = bind_to_mesh(template, part, s2.gaussians_per_triangle,
                               canonical_vertices)
        positions.append(binding.position.astype(np.float32))
        rotations.append(binding.rotation)
        log_scales.append(binding.log_scale)
        binding_part.append(np.full(len(binding), part_id, dtype=np.int32))
        binding_face.append(binding.face)
        binding_bary.append(binding.bary)
        binding_offset.append(np.zeros(len(binding), dtype=np.float32))

    # One query over the final position array: re-querying the stored
    # positions later reproduces these attributes bitwise (batched network
    # evaluation is shape-sensitive at the last ulp).
    position = np.ascontiguousarray(np.concatenate(positions), dtype=np.float32)
    density, color = field.query(position)
    # Opacity of one cell of material at the queried density.
    alpha = np.clip(1.0 - np.exp(-density * cell), 1e-3, 1.0 - 1e-3)
    opacity_logit = np.log(alpha / (1.0 - alpha))

    gaussians = GaussianSet(
        position=position,
        rotation=np.concatenate(rotations),
        log_scale=np.concatenate(log_scales),
        opacity_logit=opacity_logit,
        color=color)
    n_m = len(gaussians) - n_u

    weights = init_lbs_weights(pts, template, canonical_vertices)
    weights = knn_smooth_lbs(weights, pts, template, canonical_vertices,
                             KnnSmoothingConfig(k_neighbors=s2.knn_neighbors,
                                                iterations=s2.knn_iterations))

    avatar = HybridAvatar(
        gaussians=gaussians,
        kind=np.concatenate([np.zeros(n_u, dtype=np.uint8),
                             np.ones(n_m, dtype=np.uint8)]),
        lbs_weights=weights.astype(np.float32),
        binding_part=np.concatenate(binding_part) if n_m else np.zeros(0, np.int32),
        binding_face=np.concatenate(binding_face).astype(np.uint32)
        if n_m else np.zeros(0, np.uint32),
        binding_bary=np.concatenate(binding_bary) if n_m else np.zeros((0, 3)),
        binding_offset=np.concatenate(binding_offset) if n_m else np.zeros(0),
        part_names=part_names,
        part_shape=np.zeros(template.shape_basis.shape[2], dtype=np.float32),
        anchor_vertices=nearest_vertex_index(pts, canonical_vertices),
    )
    # Zero-initialized corrective network: articulation starts as a pure
    # blend-skinning map and learns corrections during Stage 2.
    attach_deform(avatar, make_deform(config, template))
    avatar.validate()
    return avatar


# ---------------------------------------------------------------------------
# Stage 2: animatable avatar


def train_stage2(config: EngineConfig, avatar: HybridAvatar,
                 template: BodyTemplate, guidance=None, *, out_dir=None,
                 pose_sampler: PoseSampler | None = None):
    """Train avatar attributes, corrective network, and shape coefficients.

    Per step: draw a pose from the curriculum and a camera, articulate,
    splat-render, draw the posed skeleton image (occlusion-culled) from the
    same camera, and push the distillation gradient through the splat
    backward into every parameter group. The avatar is updated in place and
    also returned. Returns (avatar, deform, records).

    ``pose_sampler`` overrides the config-built sampler, e.g. to observe its
    draw counters or to train on a custom pose distribution.
    """
    config.validate()
    avatar.validate()
    if guidance is None:
        guidance = build_guidance(config, template)
    schedule = _guidance_schedule(guidance)
    s2 = config.stage2
    deform = deform_from_avatar(avatar)
    if deform is None:
        deform = make_deform(config, template)
    render_cfg = RendererConfig(background=(_gray(guidance),) * 3)

    if pose_sampler is None:
        pose_sampler = build_pose_sampler(config, template)
    cam_sampler = build_camera_sampler(config)
    rng = np.random.default_rng([config.seed, 2])
    g = avatar.gaussians
    opt_pos = Adam(g.position.shape, lr=s2.lr_position)
    opt_rot = Adam(g.rotation.shape, lr=s2.lr_rotation)
    opt_ls = Adam(g.log_scale.shape, lr=s2.lr_log_scale)
    opt_op = Adam(g.opacity_logit.shape, lr=s2.lr_opacity)
    opt_col = Adam(g.color.shape, lr=s2.lr_color)
    opt_shape = Adam(avatar.part_shape.shape, lr=s2.lr_part_shape)
    opt_def = Adam(deform.params.shape, lr=s2.lr_deform)
    group_lrs = ((opt_pos, s2.lr_position), (opt_rot, s2.lr_rotation),
                 (opt_ls, s2.lr_log_scale), (opt_op, s2.lr_opacity),
                 (opt_col, s2.lr_color), (opt_shape, s2.lr_part_shape),
                 (opt_def, s2.lr_deform))
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    records = []
    for step in range(s2.steps):
        pose, phase = pose_sampler.sample(rng, step, s2.steps)
        cam = cam_sampler.sample(rng, pose, template, resolution=s2.resolution)
        posed, acache = articulate(avatar, template, pose, deform=deform,
                                   need_cache=True)
        out = render(posed, cam, render_cfg)
        # acache.lbs already reflects the avatar's shape coefficients, so
        # the skeleton is drawn on exactly the geometry that was rendered.
        skel = render_skeleton(template, pose, cam, lbs=acache.lbs)
        condition = Condition(camera=cam, pose=pose, image=skel.pixels)

        def hook(grad_image):
            return render_backward(posed, cam, grad_image, config=render_cfg)

        sds = sds_gradient(out.color, hook, schedule, guidance, condition,
                           seed=config.seed ^ _STAGE2_SEED_SALT,
                           call_index=step, t_range=config.sds.t_range,
                           chain_xt=config.sds.chain_xt)
        rg = sds.grads
        ag = articulate_backward(acache, rg.position, rg.rotation, rg.log_scale)

        factor = lr_decay_factor(step, s2.steps, s2.lr_decay)
        for opt, base in group_lrs:
            opt.lr = base * factor
        opt_pos.step(g.position, ag.position)
        rot_before = g.rotation.copy()
        opt_rot.step(g.rotation, ag.rotation)
        if not np.array_equal(g.rotation, rot_before):
            # Keep stored quaternions unit; skipped when nothing moved so a
            # zero-gradient step is an exact no-op.
            g.rotation[:] = normalize_quat(
                g.rotation.astype(np.float64)).astype(g.rotation.dtype)
        opt_ls.step(g.log_scale, ag.log_scale)
        opt_op.step(g.opacity_logit, rg.opacity_logit)
        opt_col.step(g.color, rg.color)
        np.clip(g.color, 0.0, 1.0, out=g.color)  # renderer color contract
        if avatar.part_shape.size:
            opt_shape.step(avatar.part_shape, ag.part_shape)
        if ag.deform_params is not None:
            opt_def.step(deform.params, ag.deform_params)

        records.append(_log_record(2, step, sds.residual_norm, t=sds.t,
                                   resolution=s2.resolution, pose_phase=phase,
                                   camera=cam, skeleton_camera=cam))
        if (out_dir is not None and s2.checkpoint_interval > 0
                and (step + 1) % s2.checkpoint_interval == 0):
            attach_deform(avatar, deform)
            save_avatar(out_dir / f"stage2_{step + 1:06d}.hga", avatar)

    attach_deform(avatar, deform)
    avatar.validate()
    return avatar, deform, records


# ---------------------------------------------------------------------------
# Evaluation and pipeline


def field_view_psnr(field, guidance, cameras, pose) -> float:
    """Mean PSNR of field renders against oracle targets over cameras."""
    background = (_gray(guidance),) * 3
    vals = []
    for cam in cameras:
        out = volume_render(field, cam, background=background)
        vals.append(psnr(out.color, guidance.target(cam, pose)))
    return float(np.mean(vals))


def avatar_view_psnr(avatar, template, deform, guidance, pose_camera_pairs) -> float:
    """Mean PSNR of posed splat renders against oracle targets."""
    render_cfg = RendererConfig(background=(_gray(guidance),) * 3)
    vals = []
    for pose, cam in pose_camera_pairs:
        posed = articulate(avatar, template, pose, deform=deform)
        out = render(posed, cam, render_cfg)
        vals.append(psnr(out.color, guidance.target(cam, pose)))
    return float(np.mean(vals))


@dataclass
class PipelineResult:
    field: RadianceField
    avatar: HybridAvatar
    deform: DeformNet
    records: list


def run_pipeline(config: EngineConfig, template: BodyTemplate,
                 out_dir=None) -> PipelineResult:
    """Stage 1, initialization, Stage 2; optionally write artifacts.

    With ``out_dir`` set, writes the trained field (canonical.nfck), the
    avatar (avatar.hga), the step log (train_log.ndjson), and the resolved
    config (config.json). All outputs are deterministic for a given config.
    """
    config.validate()
    guidance = build_guidance(config, template)
    field, rec1 = train_stage1(config, template, guidance, out_dir=out_dir)
    avatar = init_stage2(field, template, config)
    avatar, deform, rec2 = train_stage2(config, avatar, template, guidance,
                                        out_dir=out_dir)
    records = rec1 + rec2
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_field(out / "canonical.nfck", field)
        save_avatar(out / "avatar.hga", avatar)
        write_training_log(records, out / "train_log.ndjson")
        with open(out / "config.json", "w") as f:
            json.dump(config_snapshot(config), f, sort_keys=True, indent=2)
            f.write("\n")
    return PipelineResult(field=field, avatar=avatar, deform=deform,
                          records=records)
