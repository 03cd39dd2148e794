"""From canonical field to animatable Gaussian avatar, then make it wave.

Second training stage at toy scale: extract Gaussians from the field's
density, bind hand/face members to their mesh triangles, train the free
members plus the pose-corrective network, and render a short motion clip.

Run from the repository root (demos/01_canonical_field.py first is nice
but optional; a quick field is trained here when its output is missing):

    python3 demos/02_animatable_avatar.py

Outputs land in demos/out/02/.
"""

import time
from pathlib import Path

from avatarforge.config import config_from_dict
from avatarforge.field import load_field
from avatarforge.gaussians import save_avatar
from avatarforge.images import png_bytes
from avatarforge.mannequin import make_mannequin, preset_pose
from avatarforge.motions import builtin_motion
from avatarforge.rigging import articulate
from avatarforge.sampling import orbit_camera
from avatarforge.splat import RendererConfig, render
from avatarforge.trainer import (avatar_view_psnr, build_guidance, init_stage2,
                                 make_field, train_stage2)

FIELD_FROM_01 = Path(__file__).parent / "out" / "01" / "canonical.nfck"
OUT = Path(__file__).parent / "out" / "02"

CONFIG = {
    "seed": 0,
    "guidance": {"cfg_scale": 1.0},
    "field_model": {"hidden": [32, 32], "n_samples": 24},
    "pretrain": {"steps": 80, "resolution": 64, "n_rays": 1500},
    "stage1": {"steps": 150, "resolution_start": 64, "resolution_end": 64,
               "geo_samples": 64, "lr_decay": 0.2},
    "stage2": {"steps": 200, "resolution": 64, "grid_resolution": 24,
               "density_threshold": 1.5, "knn_neighbors": 8,
               "knn_iterations": 3, "lr_decay": 0.2},
}


def get_field(config, template, guidance):
    if FIELD_FROM_01.exists():
        print(f"     reusing {FIELD_FROM_01}")
        return load_field(FIELD_FROM_01)
    print("     no saved field found; training a quick one (see demo 01)")
    from avatarforge.trainer import train_stage1
    field, _ = train_stage1(config, template, guidance)
    return field


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    config = config_from_dict(CONFIG)
    template = make_mannequin(seed=0)
    guidance = build_guidance(config, template)

    print("1/4  loading the canonical field ...")
    field = get_field(config, template, guidance)

    print("2/4  initializing the hybrid avatar from field density ...")
    avatar = init_stage2(field, template, config)
    print(f"     {avatar.n_unconstrained} free + {avatar.n_bound} mesh-bound "
          f"members (parts: {', '.join(avatar.part_names)})")

    print("3/4  stage-2 training over the pose curriculum ...")
    t0 = time.perf_counter()
    avatar, deform, records = train_stage2(config, avatar, template, guidance)
    pose = preset_pose("a", template.n_joints)
    cam = orbit_camera(template, azimuth_deg=30.0, resolution=128)
    psnr = avatar_view_psnr(avatar, template, deform, guidance, [(pose, cam)])
    print(f"     {time.perf_counter() - t0:.0f}s, {len(records)} steps, "
          f"canonical-view PSNR {psnr:.1f} dB")
    save_avatar(OUT / "avatar.hga", avatar)

    print("4/4  rendering a wave-motion turntable ...")
    render_cfg = RendererConfig(background=(guidance.gray_level,) * 3)
    frames = builtin_motion("wave")[::6]  # every 6th frame keeps it quick
    for i, frame in enumerate(frames):
        cam = orbit_camera(template, azimuth_deg=25.0 * i, resolution=128)
        posed = articulate(avatar, template, frame.pose, deform=deform)
        out = render(posed, cam, render_cfg)
        (OUT / f"wave_{i:03d}.png").write_bytes(png_bytes(out.color))
    print(f"     wrote avatar.hga and {len(frames)} frames under {OUT}/")
    print("     next: demos/03_service_roundtrip.py drives the same avatar")
    print("     over the HTTP API.")


if __name__ == "__main__":
    main()
