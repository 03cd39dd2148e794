"""Numba kernels for tile-based Gaussian splatting (forward and backward).

Kernels run per tile with float64 math and fastmath disabled; per-entry
gradient buffers are reduced outside the kernel in fixed order, so outputs
are bit-identical across runs and thread counts.
"""
from __future__ import annotations

import numpy as np
from numba import njit, prange


@njit(cache=True, parallel=True, fastmath=False)
def forward_kernel(height, width, tile_size, offsets, entries,
                   mean2d, qcov, m_cut, opacity, color, depth,
                   background, stop_t,
                   out_rgb, out_alpha, out_depth):
    n_tiles_x = (width + tile_size - 1) // tile_size
    n_tiles = offsets.shape[0] - 1
    for tile in prange(n_tiles):
        ty = tile // n_tiles_x
        tx = tile % n_tiles_x
        y0 = ty * tile_size
        x0 = tx * tile_size
        y1 = min(y0 + tile_size, height)
        x1 = min(x0 + tile_size, width)
        lo = offsets[tile]
        hi = offsets[tile + 1]
        for py in range(y0, y1):
            cy = py + 0.5
            for px in range(x0, x1):
                cx = px + 0.5
                trans = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                acc_a = 0.0
                acc_d = 0.0
                for e in range(lo, hi):
                    if trans < stop_t:
                        break
                    i = entries[e]
                    dx = cx - mean2d[i, 0]
                    dy = cy - mean2d[i, 1]
                    m = qcov[i, 0] * dx * dx + 2.0 * qcov[i, 1] * dx * dy + qcov[i, 2] * dy * dy
                    if m > m_cut[i] or m < 0.0:
                        continue
                    a = opacity[i] * np.exp(-0.5 * m)
                    w = a * trans
                    r += w * color[i, 0]
                    g += w * color[i, 1]
                    b += w * color[i, 2]
                    acc_a += w
                    acc_d += w * depth[i]
                    trans *= 1.0 - a
                out_rgb[py, px, 0] = r + trans * background[0]
                out_rgb[py, px, 1] = g + trans * background[1]
                out_rgb[py, px, 2] = b + trans * background[2]
                out_alpha[py, px] = acc_a
                out_depth[py, px] = acc_d


@njit(cache=True, parallel=True, fastmath=False)
def backward_kernel(height, width, tile_size, offsets, entries,
                    mean2d, qcov, m_cut, opacity, color, depth,
                    background, stop_t,
                    grad_rgb, grad_alpha, entry_grads):
    """Accumulate per-entry screen-space gradients.

    entry_grads[e] layout: [gc_r, gc_g, gc_b, g_alpha, g_mx, g_my,
    gq_xx, gq_xy, gq_yy] for the entry's Gaussian at this tile.
    """
    n_tiles_x = (width + tile_size - 1) // tile_size
    n_tiles = offsets.shape[0] - 1
    max_k = 0
    for tile in range(n_tiles):
        k = offsets[tile + 1] - offsets[tile]
        if k > max_k:
            max_k = k
    for tile in prange(n_tiles):
        ty = tile // n_tiles_x
        tx = tile % n_tiles_x
        y0 = ty * tile_size
        x0 = tx * tile_size
        y1 = min(y0 + tile_size, height)
        x1 = min(x0 + tile_size, width)
        lo = offsets[tile]
        hi = offsets[tile + 1]
        if hi == lo:
            continue
        hit_e = np.empty(max_k, dtype=np.int64)
        hit_a = np.empty(max_k, dtype=np.float64)
        hit_g = np.empty(max_k, dtype=np.float64)
        hit_t = np.empty(max_k, dtype=np.float64)
        hit_dx = np.empty(max_k, dtype=np.float64)
        hit_dy = np.empty(max_k, dtype=np.float64)
        for py in range(y0, y1):
            cy = py + 0.5
            for px in range(x0, x1):
                cx = px + 0.5
                go_r = grad_rgb[py, px, 0]
                go_g = grad_rgb[py, px, 1]
                go_b = grad_rgb[py, px, 2]
                go_a = grad_alpha[py, px]
                if go_r == 0.0 and go_g == 0.0 and go_b == 0.0 and go_a == 0.0:
                    continue
                # Forward replay collecting contributions.
                trans = 1.0
                n_hit = 0
                for e in range(lo, hi):
                    if trans < stop_t:
                        break
                    i = entries[e]
                    dx = cx - mean2d[i, 0]
                    dy = cy - mean2d[i, 1]
                    m = qcov[i, 0] * dx * dx + 2.0 * qcov[i, 1] * dx * dy + qcov[i, 2] * dy * dy
                    if m > m_cut[i] or m < 0.0:
                        continue
                    gval = np.exp(-0.5 * m)
                    a = opacity[i] * gval
                    hit_e[n_hit] = e
                    hit_a[n_hit] = a
                    hit_g[n_hit] = gval
                    hit_t[n_hit] = trans
                    hit_dx[n_hit] = dx
                    hit_dy[n_hit] = dy
                    n_hit += 1
                    trans *= 1.0 - a
                # Reverse sweep with suffix accumulators.
                s_r = trans * background[0]
                s_g = trans * background[1]
                s_b = trans * background[2]
                s_a = 0.0
                for k in range(n_hit - 1, -1, -1):
                    e = hit_e[k]
                    i = entries[e]
                    a = hit_a[k]
                    gval = hit_g[k]
                    t_before = hit_t[k]
                    dx = hit_dx[k]
                    dy = hit_dy[k]
                    w = a * t_before
                    one_m = 1.0 - a
                    # dL/da from color channels, background, and alpha channel.
                    g_a = (go_r * (t_before * color[i, 0] - s_r / one_m)
                           + go_g * (t_before * color[i, 1] - s_g / one_m)
                           + go_b * (t_before * color[i, 2] - s_b / one_m)
                           + go_a * (t_before - s_a / one_m))
                    dm = -0.5 * g_a * opacity[i] * gval
                    qx = qcov[i, 0] * dx + qcov[i, 1] * dy
                    qy = qcov[i, 1] * dx + qcov[i, 2] * dy
                    entry_grads[e, 0] += go_r * w
                    entry_grads[e, 1] += go_g * w
                    entry_grads[e, 2] += go_b * w
                    entry_grads[e, 3] += g_a * gval
                    entry_grads[e, 4] += -2.0 * dm * qx
                    entry_grads[e, 5] += -2.0 * dm * qy
                    entry_grads[e, 6] += dm * dx * dx
                    entry_grads[e, 7] += dm * dx * dy
                    entry_grads[e, 8] += dm * dy * dy
                    # Roll suffix sums back to before this contribution.
                    s_r = s_r + w * color[i, 0]
                    s_g = s_g + w * color[i, 1]
                    s_b = s_b + w * color[i, 2]
                    s_a = s_a + w
