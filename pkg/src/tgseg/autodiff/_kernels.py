"""Numba loops for multi-level bilinear sampling.

Values are stored as ``[N, S, C]`` with all pyramid levels flattened and
concatenated along ``S``. Locations are normalized ``(x, y)`` pairs; a location
of 0 maps to the first grid node and 1 to the last (align-corners).
"""

import numba
import numpy as np


@numba.njit(cache=True, inline="always")
def _corners(x, y, h, w):
    xc = min(max(x, 0.0), 1.0)
    yc = min(max(y, 0.0), 1.0)
    px = xc * (w - 1)
    py = yc * (h - 1)
    if w > 1:
        x0 = min(int(np.floor(px)), w - 2)
        x1 = x0 + 1
    else:
        x0 = 0
        x1 = 0
    if h > 1:
        y0 = min(int(np.floor(py)), h - 2)
        y1 = y0 + 1
    else:
        y0 = 0
        y1 = 0
    return x0, x1, y0, y1, px - x0, py - y0


@numba.njit(cache=True, fastmath=True, error_model="numpy")
def sample_forward(value, starts, shapes, loc, attn):
    n_b, n_q, n_l, n_k = attn.shape
    n_c = value.shape[2]
    out = np.zeros((n_b, n_q, n_c), dtype=value.dtype)
    # corner weights are stored in value's dtype so the channel loop stays in one precision
    wt = np.empty(4, dtype=value.dtype)
    for b in range(n_b):
        for q in range(n_q):
            for lv in range(n_l):
                h = shapes[lv, 0]
                w = shapes[lv, 1]
                s0 = starts[lv]
                for k in range(n_k):
                    a = attn[b, q, lv, k]
                    x0, x1, y0, y1, wx, wy = _corners(loc[b, q, lv, k, 0], loc[b, q, lv, k, 1], h, w)
                    wt[0] = a * (1 - wy) * (1 - wx)
                    wt[1] = a * (1 - wy) * wx
                    wt[2] = a * wy * (1 - wx)
                    wt[3] = a * wy * wx
                    w00, w01, w10, w11 = wt[0], wt[1], wt[2], wt[3]
                    i00 = s0 + y0 * w + x0
                    i01 = s0 + y0 * w + x1
                    i10 = s0 + y1 * w + x0
                    i11 = s0 + y1 * w + x1
                    for c in range(n_c):
                        out[b, q, c] += (
                            w00 * value[b, i00, c]
                            + w01 * value[b, i01, c]
                            + w10 * value[b, i10, c]
                            + w11 * value[b, i11, c]
                        )
    return out


@numba.njit(cache=True, fastmath=True, error_model="numpy")
def sample_backward(value, starts, shapes, loc, attn, grad_out):
    n_b, n_q, n_l, n_k = attn.shape
    n_c = value.shape[2]
    g_value = np.zeros_like(value)
    g_loc = np.zeros_like(loc)
    g_attn = np.zeros_like(attn)
    wt = np.empty(8, dtype=value.dtype)
    for b in range(n_b):
        for q in range(n_q):
            for lv in range(n_l):
                h = shapes[lv, 0]
                w = shapes[lv, 1]
                s0 = starts[lv]
                for k in range(n_k):
                    a = attn[b, q, lv, k]
                    rx = loc[b, q, lv, k, 0]
                    ry = loc[b, q, lv, k, 1]
                    x0, x1, y0, y1, wx, wy = _corners(rx, ry, h, w)
                    i00 = s0 + y0 * w + x0
                    i01 = s0 + y0 * w + x1
                    i10 = s0 + y1 * w + x0
                    i11 = s0 + y1 * w + x1
                    wt[0] = (1 - wy) * (1 - wx)
                    wt[1] = (1 - wy) * wx
                    wt[2] = wy * (1 - wx)
                    wt[3] = wy * wx
                    wt[4] = 1 - wx
                    wt[5] = wx
                    wt[6] = 1 - wy
                    wt[7] = wy
                    w00, w01, w10, w11 = wt[0], wt[1], wt[2], wt[3]
                    ux, vx, uy, vy = wt[4], wt[5], wt[6], wt[7]
                    ga = wt[0] * 0
                    gx = ga
                    gy = ga
                    for c in range(n_c):
                        g = grad_out[b, q, c]
                        v00 = value[b, i00, c]
                        v01 = value[b, i01, c]
                        v10 = value[b, i10, c]
                        v11 = value[b, i11, c]
                        ga += g * (w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11)
                        gx += g * (uy * (v01 - v00) + vy * (v11 - v10))
                        gy += g * (ux * (v10 - v00) + vx * (v11 - v01))
                        ag = a * g
                        g_value[b, i00, c] += ag * w00
                        g_value[b, i01, c] += ag * w01
                        g_value[b, i10, c] += ag * w10
                        g_value[b, i11, c] += ag * w11
                    g_attn[b, q, lv, k] = ga
                    if 0.0 <= rx <= 1.0 and w > 1:
                        g_loc[b, q, lv, k, 0] = a * gx * (w - 1)
                    if 0.0 <= ry <= 1.0 and h > 1:
                        g_loc[b, q, lv, k, 1] = a * gy * (h - 1)
    return g_value, g_loc, g_attn
