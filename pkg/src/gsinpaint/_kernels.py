"""Numba tile kernels for front-to-back splat blending and its adjoint.

Per-pixel channel layout of the packed value buffer ``vals`` (n_gauss, NV):
3 color, 16 feature, 1 depth. Alpha accumulation is handled separately.
"""

import math
import os

import numpy as np
from numba import config, njit, prange

if "NUMBA_THREADING_LAYER" not in os.environ:
    # the bundled TBB is too old for numba; OpenMP is always present
    config.THREADING_LAYER = "omp"

ALPHA_MAX = 0.999
T_MIN = 1e-4
CUTOFF_Q = 9.0
_E3 = math.exp(-0.5 * CUTOFF_Q)
# C1 taper: exp(-q/2) minus the tangent line at the cutoff, renormalized to peak 1.
_TAPER_A = _E3 * (1.0 + 0.5 * CUTOFF_Q)
_TAPER_NORM = 1.0 / (1.0 - _TAPER_A)

NV = 20  # 3 color + 16 feature + 1 depth
IDX_DEPTH = 19


@njit(cache=True, inline="always")
def falloff(q):
    return (math.exp(-0.5 * q) - _TAPER_A + 0.5 * _E3 * q) * _TAPER_NORM


@njit(cache=True, inline="always")
def falloff_grad(q):
    return (-0.5 * math.exp(-0.5 * q) + 0.5 * _E3) * _TAPER_NORM


@njit(cache=True, parallel=True)
def forward_tiles(tile_offsets, tile_ids, means, conics, opac, vals, bg_vals,
                  H, W, tile, n_tiles_x, out_vals, out_alpha, out_T, out_last, out_count):
    n_tiles = tile_offsets.shape[0] - 1
    for t in prange(n_tiles):
        start = tile_offsets[t]
        end = tile_offsets[t + 1]
        ty = t // n_tiles_x
        tx = t - ty * n_tiles_x
        y0 = ty * tile
        x0 = tx * tile
        acc = np.empty(NV)
        for py in range(y0, min(y0 + tile, H)):
            for px in range(x0, min(x0 + tile, W)):
                T = 1.0
                for c in range(NV):
                    acc[c] = 0.0
                last = start
                count = 0
                for k in range(start, end):
                    g = tile_ids[k]
                    dx = px - means[g, 0]
                    dy = py - means[g, 1]
                    q = conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy + conics[g, 2] * dy * dy
                    if q >= CUTOFF_Q or q < 0.0:
                        continue
                    a = opac[g] * falloff(q)
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    if a <= 0.0:
                        continue
                    w = a * T
                    for c in range(NV):
                        acc[c] += vals[g, c] * w
                    T *= 1.0 - a
                    last = k + 1
                    count += 1
                    if T < T_MIN:
                        break
                for c in range(NV):
                    out_vals[py, px, c] = acc[c] + bg_vals[c] * T
                out_alpha[py, px] = 1.0 - T
                out_T[py, px] = T
                out_last[py, px] = last
                out_count[py, px] = count


@njit(cache=True, parallel=True)
def backward_tiles(tile_offsets, tile_ids, means, conics, opac, vals, bg_vals,
                   H, W, tile, n_tiles_x, final_T, last_idx, g_vals, g_alpha, entry_grads):
    """Adjoint of ``forward_tiles``.

    Each tile-list entry owns one row of ``entry_grads`` (columns: 0-1 mean2d,
    2-4 conic, 5 opacity, 6-25 packed values), so tiles never write to shared
    slots; the caller reduces rows per Gaussian in a fixed order.
    """
    n_tiles = tile_offsets.shape[0] - 1
    for t in prange(n_tiles):
        start = tile_offsets[t]
        ty = t // n_tiles_x
        tx = t - ty * n_tiles_x
        y0 = ty * tile
        x0 = tx * tile
        R = np.empty(NV)
        for py in range(y0, min(y0 + tile, H)):
            for px in range(x0, min(x0 + tile, W)):
                T = final_T[py, px]
                for c in range(NV):
                    R[c] = bg_vals[c]
                # alpha channel: value 1 per splat, background 0
                Ra = 0.0
                ga = g_alpha[py, px]
                for k in range(last_idx[py, px] - 1, start - 1, -1):
                    g = tile_ids[k]
                    dx = px - means[g, 0]
                    dy = py - means[g, 1]
                    q = conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy + conics[g, 2] * dy * dy
                    if q >= CUTOFF_Q or q < 0.0:
                        continue
                    fo = falloff(q)
                    a_raw = opac[g] * fo
                    a = a_raw
                    clamped = False
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                        clamped = True
                    if a <= 0.0:
                        continue
                    Ti = T / (1.0 - a)
                    w = a * Ti
                    dL_da = ga * Ti * (1.0 - Ra)
                    for c in range(NV):
                        gv = g_vals[py, px, c]
                        if gv != 0.0:
                            entry_grads[k, 6 + c] += gv * w
                            dL_da += gv * Ti * (vals[g, c] - R[c])
                        R[c] = vals[g, c] * a + R[c] * (1.0 - a)
                    Ra = a + Ra * (1.0 - a)
                    T = Ti
                    if clamped:
                        continue
                    entry_grads[k, 5] += dL_da * fo
                    dL_dq = dL_da * opac[g] * falloff_grad(q)
                    ca = conics[g, 0]
                    cb = conics[g, 1]
                    cc = conics[g, 2]
                    entry_grads[k, 0] += -2.0 * dL_dq * (ca * dx + cb * dy)
                    entry_grads[k, 1] += -2.0 * dL_dq * (cb * dx + cc * dy)
                    entry_grads[k, 2] += dL_dq * dx * dx
                    entry_grads[k, 3] += dL_dq * 2.0 * dx * dy
                    entry_grads[k, 4] += dL_dq * dy * dy
