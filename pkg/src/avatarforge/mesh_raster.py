"""Deterministic z-buffer triangle rasterizer for silhouette/depth targets.

Vertices are snapped to a 1/16-subpixel integer grid and coverage is
decided by integer edge functions with a top-left fill rule. Integer
arithmetic makes shared triangle edges watertight (each boundary pixel
is claimed by exactly one triangle) and the output bit-identical across
platforms. Depth is perspective-correct via 1/z interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

SUBPIX = 16  # subpixel positions per pixel along each axis
_COORD_LIMIT = 1 << 20  # snapped coords clamped here; keeps edge fns in int64


@dataclass
class MeshRaster:
    silhouette: np.ndarray  # [H, W] 0/1
    depth: np.ndarray       # [H, W] camera depth, 0 where uncovered
    color: np.ndarray | None = None  # [H, W, 3] if vertex colors given


@njit(cache=True)
def _raster_kernel(xi, yi, inv_z, faces, face_ok, height, width,
                   zbuf, tri_id, bary):  # pragma: no cover - jit
    half = SUBPIX // 2
    for f in range(faces.shape[0]):
        if not face_ok[f]:
            continue
        ia, ib, ic = faces[f, 0], faces[f, 1], faces[f, 2]
        ax, ay = xi[ia], yi[ia]
        bx, by = xi[ib], yi[ib]
        cx, cy = xi[ic], yi[ic]
        area2 = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area2 == 0:
            continue
        flipped = area2 < 0
        if flipped:
            bx, by, cx, cy = cx, cy, bx, by
            ib, ic = ic, ib
            area2 = -area2

        # top-left rule per edge: accept w == 0 only on top or left edges
        tl0 = (cy - by < 0) or (cy == by and cx - bx > 0)  # edge b->c
        tl1 = (ay - cy < 0) or (ay == cy and ax - cx > 0)  # edge c->a
        tl2 = (by - ay < 0) or (by == ay and bx - ax > 0)  # edge a->b

        minx = min(ax, min(bx, cx))
        maxx = max(ax, max(bx, cx))
        miny = min(ay, min(by, cy))
        maxy = max(ay, max(by, cy))
        # first/last pixel whose center (16j + 8) can fall inside
        j0 = max(0, -((-(minx - half)) // SUBPIX))
        j1 = min(width - 1, (maxx - half) // SUBPIX)
        i0 = max(0, -((-(miny - half)) // SUBPIX))
        i1 = min(height - 1, (maxy - half) // SUBPIX)
        if j0 > j1 or i0 > i1:
            continue

        inv_area = 1.0 / area2
        iza, izb, izc = inv_z[ia], inv_z[ib], inv_z[ic]
        for i in range(i0, i1 + 1):
            py = i * SUBPIX + half
            for j in range(j0, j1 + 1):
                px = j * SUBPIX + half
                w0 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
                w1 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
                w2 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
                if w0 < 0 or w1 < 0 or w2 < 0:
                    continue
                if (w0 == 0 and not tl0) or (w1 == 0 and not tl1) \
                        or (w2 == 0 and not tl2):
                    continue
                l0 = w0 * inv_area
                l1 = w1 * inv_area
                l2 = w2 * inv_area
                iz = l0 * iza + l1 * izb + l2 * izc
                z = 1.0 / iz
                if z < zbuf[i, j]:
                    zbuf[i, j] = z
                    tri_id[i, j] = f
                    bary[i, j, 0] = l0
                    if flipped:
                        bary[i, j, 1] = l2
                        bary[i, j, 2] = l1
                    else:
                        bary[i, j, 1] = l1
                        bary[i, j, 2] = l2


def rasterize_mesh(vertices, faces, cam, vertex_colors=None, z_min=1e-3):
    """Rasterize a triangle mesh into silhouette, depth, and optional color.

    Triangles with any vertex closer than z_min to the camera plane are
    dropped whole (no near-plane clipping); desk cameras never get that
    close. Winding does not matter: both orientations rasterize alike.
    """
    v = np.asarray(vertices, dtype=np.float64)
    f = np.ascontiguousarray(faces, dtype=np.int64)
    h, w = cam.height, cam.width

    v_cam = v @ cam.rotation.T + cam.translation  # [V, 3]
    z = v_cam[:, 2]
    v_ok = z > z_min
    safe_z = np.where(v_ok, z, 1.0)
    x = cam.fx * v_cam[:, 0] / safe_z + cam.cx
    y = cam.fy * v_cam[:, 1] / safe_z + cam.cy
    xi = np.clip(np.round(x * SUBPIX), -_COORD_LIMIT, _COORD_LIMIT).astype(np.int64)
    yi = np.clip(np.round(y * SUBPIX), -_COORD_LIMIT, _COORD_LIMIT).astype(np.int64)
    inv_z = np.where(v_ok, 1.0 / safe_z, 0.0)
    face_ok = v_ok[f].all(axis=1)

    zbuf = np.full((h, w), np.inf)
    tri_id = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3))
    _raster_kernel(xi, yi, inv_z, f, face_ok, h, w, zbuf, tri_id, bary)

    covered = tri_id >= 0
    silhouette = covered.astype(np.float64)
    depth = np.where(covered, zbuf, 0.0)

    color = None
    if vertex_colors is not None:
        vc = np.asarray(vertex_colors, dtype=np.float64)
        color = np.zeros((h, w, 3))
        if covered.any():
            vid = f[tri_id[covered]]          # [P, 3]
            lam = bary[covered]               # [P, 3]
            iz = inv_z[vid]                   # [P, 3]
            num = np.einsum("pk,pk,pkc->pc", lam, iz, vc[vid])
            den = np.einsum("pk,pk->p", lam, iz)
            color[covered] = num / den[:, None]
    return MeshRaster(silhouette=silhouette, depth=depth, color=color)
