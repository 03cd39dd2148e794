"""Drive an avatar over the HTTP API: pose it, reshape it, grab frames.

Starts the session service on a loopback port, then acts as a plain HTTP
client: reads metadata, posts pose and shape edits, and saves the frames
the server renders. Everything the browser viewer does goes through these
same endpoints.

Run from the repository root (demos/02_animatable_avatar.py first is nice
but optional; a tiny untrained avatar is built when its output is missing):

    python3 demos/03_service_roundtrip.py

Outputs land in demos/out/03/.
"""

import json
import threading
import urllib.request
from pathlib import Path

import numpy as np

from avatarforge.gaussians import GaussianSet, HybridAvatar, load_avatar
from avatarforge.mannequin import make_mannequin
from avatarforge.rigging import init_lbs_weights
from avatarforge.service import Session, make_server

AVATAR_FROM_02 = Path(__file__).parent / "out" / "02" / "avatar.hga"
OUT = Path(__file__).parent / "out" / "03"


def quick_avatar(template, n=400) -> HybridAvatar:
    """Untrained stand-in: gray Gaussians seeded on mesh vertices."""
    rng = np.random.default_rng(0)
    pos = template.vertices_rest[rng.choice(template.n_vertices, n)]
    gaussians = GaussianSet(
        position=pos.astype(np.float32),
        rotation=np.tile(np.array([1, 0, 0, 0], np.float32), (n, 1)),
        log_scale=np.full((n, 3), -3.5, np.float32),
        opacity_logit=np.full(n, 2.0, np.float32),
        color=np.full((n, 3), 0.6, np.float32))
    weights = init_lbs_weights(pos, template, template.vertices_rest)
    return HybridAvatar.from_unconstrained(
        gaussians, weights, n_basis=template.shape_basis.shape[2])


def get(base, path):
    with urllib.request.urlopen(base + path) as resp:
        return resp.read(), dict(resp.headers)


def post(base, path, payload):
    req = urllib.request.Request(base + path, data=json.dumps(payload).encode(),
                                 headers={"Content-Type": "application/json"})
    with urllib.request.urlopen(req) as resp:
        return resp.read(), dict(resp.headers)


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    template = make_mannequin(seed=0)
    if AVATAR_FROM_02.exists():
        print(f"1/4  loading {AVATAR_FROM_02}")
        avatar = load_avatar(AVATAR_FROM_02)
    else:
        print("1/4  no trained avatar found; using an untrained stand-in")
        avatar = quick_avatar(template)

    session = Session(avatar, template, resolution=256)
    server = make_server(session, port=0)  # any free loopback port
    threading.Thread(target=server.serve_forever, daemon=True).start()
    base = f"http://127.0.0.1:{server.server_address[1]}"
    print(f"     serving on {base}")

    print("2/4  GET /api/meta ...")
    body, headers = get(base, "/api/meta")
    meta = json.loads(body)
    print(f"     {meta['counts']['total']} members, joints: "
          f"{', '.join(meta['joint_names'][:4])}, ... "
          f"(state version {headers['X-State-Version']})")

    print("3/4  posing joints and editing shape over POST ...")
    frame, _ = get(base, "/api/frame?az=30&el=75")
    (OUT / "frame_rest.png").write_bytes(frame)
    # exact unit quaternions about +z; the service rejects norms off by >1e-6
    def z_spin(deg: float) -> list[float]:
        h = np.radians(deg) / 2.0
        return [float(np.cos(h)), 0.0, 0.0, float(np.sin(h))]

    post(base, "/api/pose", {"joints": {"r_shoulder": z_spin(-75.0),
                                        "r_elbow": z_spin(-30.0)}})
    frame, headers = get(base, "/api/frame?az=30&el=75")
    (OUT / "frame_posed.png").write_bytes(frame)
    post(base, "/api/shape", {"delta": [0.6, 0.0]})
    frame, headers = get(base, "/api/frame?az=30&el=75")
    (OUT / "frame_reshaped.png").write_bytes(frame)
    print(f"     three frames saved; state version now "
          f"{headers['X-State-Version']}")

    print("4/4  skeleton overlay and reset ...")
    skel, _ = get(base, "/api/frame?az=30&el=75&skeleton=1")
    (OUT / "frame_skeleton.png").write_bytes(skel)
    post(base, "/api/reset", {})
    server.shutdown()
    print(f"     wrote 4 PNG frames under {OUT}/")
    print("     the same endpoints back the browser viewer: build frontend/")
    print("     and launch `avatarforge serve --static frontend/dist`.")


if __name__ == "__main__":
    main()
