"""Grow a canonical radiance field from scratch, in about two minutes.

Walks the first training stage at toy scale: fit the field's opacity to
the body silhouette, then distill color from the per-view oracle. Writes
orbit renders before and after so the progression is visible.

Run from the repository root:

    python3 demos/01_canonical_field.py

Outputs land in demos/out/01/. Scale the step counts back up with
configs/desk.toml (or configs/paper.toml) when you have minutes (or GPUs)
to spend; the code path is identical.
"""

import time
from pathlib import Path

import numpy as np

from avatarforge.config import config_from_dict
from avatarforge.field import pretrain, save_field, silhouette_iou, volume_render
from avatarforge.images import png_bytes
from avatarforge.mannequin import make_mannequin, preset_pose
from avatarforge.sampling import ring_cameras
from avatarforge.trainer import (build_camera_sampler, build_guidance,
                                 field_view_psnr, make_field, train_stage1)

OUT = Path(__file__).parent / "out" / "01"

# Toy-scale recipe: small MLP, coarse sampling, minute-scale budgets.
# configs/desk.toml is the same dictionary with larger numbers.
CONFIG = {
    "seed": 0,
    "guidance": {"cfg_scale": 1.0},  # oracle backend: pure conditional
    "field_model": {"hidden": [32, 32], "n_samples": 24},
    "pretrain": {"steps": 80, "resolution": 64, "n_rays": 1500},
    "stage1": {"steps": 150, "resolution_start": 64, "resolution_end": 64,
               "geo_samples": 64, "lr_decay": 0.2},
}


def save_ring(field, template, pose, background, path_prefix):
    cams = ring_cameras(template, pose, n_views=4, resolution=128)
    for k, cam in enumerate(cams):
        out = volume_render(field, cam, background=background)
        path = OUT / f"{path_prefix}_view{k}.png"
        path.write_bytes(png_bytes(out.color))
    return cams


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    config = config_from_dict(CONFIG)
    template = make_mannequin(seed=0)
    guidance = build_guidance(config, template)
    pose = preset_pose(config.pose.canonical_name, template.n_joints)
    background = (guidance.gray_level,) * 3

    print("1/3  pretraining: fitting field opacity+depth to the mesh ...")
    field = make_field(config, template)
    t0 = time.perf_counter()
    pretrain(field, template, pose, config.pretrain.steps, config.seed,
             resolution=config.pretrain.resolution,
             n_rays=config.pretrain.n_rays, lr=config.pretrain.lr,
             sampler=build_camera_sampler(config))
    iou = silhouette_iou(field, template, pose,
                         ring_cameras(template, pose, n_views=4, resolution=128))
    print(f"     {time.perf_counter() - t0:.0f}s, silhouette IoU {iou:.2f}")
    save_ring(field, template, pose, background, "after_pretrain")

    print("2/3  distilling color from the oracle (skeleton-conditioned SDS) ...")
    t0 = time.perf_counter()
    # train_stage1 would redo the pretraining; pass the field we already fit.
    config.pretrain.steps = 0
    field, records = train_stage1(config, template, guidance, field=field)
    cams = save_ring(field, template, pose, background, "after_stage1")
    psnr = field_view_psnr(field, guidance, cams, pose)
    print(f"     {time.perf_counter() - t0:.0f}s, {len(records)} log records, "
          f"eval PSNR {psnr:.1f} dB on 4 held-out views")

    print("3/3  saving the trained field ...")
    save_field(OUT / "canonical.nfck", field)
    print(f"     wrote {OUT}/canonical.nfck and 8 orbit renders under {OUT}/")
    print("     next: demos/02_animatable_avatar.py turns this field into a")
    print("     posable Gaussian avatar (it reuses this output if present).")


if __name__ == "__main__":
    main()
