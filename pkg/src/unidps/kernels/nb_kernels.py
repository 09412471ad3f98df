"""Numba versions of the hot kernels; see np_kernels for the contracts.

All loops run sequentially (no prange, no fastmath) so results are
deterministic and summation order is fixed.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def sg_mine(f, anchor_index, nbr_index, pos_mask):
    na, kn = nbr_index.shape
    nc = f.shape[1]
    jplus = np.full(na, -1, np.int64)
    jminus = np.full(na, -1, np.int64)
    dplus = np.zeros(na)
    dminus = np.zeros(na)
    for a in range(na):
        ai = anchor_index[a]
        best_p = -1.0
        best_n = np.inf
        jp = np.int64(-1)
        jn = np.int64(-1)
        for t in range(kn):
            ni = nbr_index[a, t]
            s = 0.0
            for c in range(nc):
                diff = f[ai, c] - f[ni, c]
                s += diff * diff
            d = np.sqrt(s)
            if pos_mask[a, t]:
                if d > best_p:
                    best_p = d
                    jp = ni
            else:
                if d < best_n:
                    best_n = d
                    jn = ni
        jplus[a] = jp
        jminus[a] = jn
        if jp >= 0:
            dplus[a] = best_p
        if jn >= 0:
            dminus[a] = best_n
    return jplus, jminus, dplus, dminus


@njit(cache=True)
def dg_forward(f, anchor_index, nbr_index, ok_mask, depth, tau):
    na, kn = nbr_index.shape
    nc = f.shape[1]
    grad = np.zeros_like(f)
    total = 0.0
    for a in range(na):
        ai = anchor_index[a]
        for t in range(kn):
            if not ok_mask[a, t]:
                continue
            ni = nbr_index[a, t]
            s = 0.0
            for c in range(nc):
                diff = f[ai, c] - f[ni, c]
                s += diff * diff
            n = np.sqrt(s)
            w = np.exp(-abs(depth[ai] - depth[ni]) / tau)
            e = w * np.exp(-n)
            total += e
            if n > 1e-12:
                coef = -e / n
                for c in range(nc):
                    g = coef * (f[ai, c] - f[ni, c])
                    grad[ai, c] += g
                    grad[ni, c] -= g
    return total, grad


@njit(cache=True)
def valid_nearest_downsample(depth, valid, scale):
    h, w = depth.shape
    hb, wb = h // scale, w // scale
    out = np.zeros((hb, wb))
    ok = np.zeros((hb, wb), np.bool_)
    c = (scale - 1) / 2.0
    for by in range(hb):
        for bx in range(wb):
            best = np.inf
            val = 0.0
            found = False
            for dy in range(scale):
                for dx in range(scale):
                    if not valid[by * scale + dy, bx * scale + dx]:
                        continue
                    dist = (dy - c) ** 2 + (dx - c) ** 2
                    if dist < best:
                        best = dist
                        val = depth[by * scale + dy, bx * scale + dx]
                        found = True
            if found:
                out[by, bx] = val
                ok[by, bx] = True
    return out, ok
