"""Vectorized numpy fallbacks for the hot kernels.

Semantics match ``nb_kernels`` exactly (same tie-breaking: first index
wins); floating-point sums may differ from the loop versions in the last
ulps because numpy reduces pairwise.
"""

from __future__ import annotations

import numpy as np


def sg_mine(f: np.ndarray, anchor_index: np.ndarray, nbr_index: np.ndarray,
            pos_mask: np.ndarray):
    """Hard-example mining for the semantic-to-depth loss.

    ``f`` is [P, C] (flattened grid).  For each anchor, find the neighbor
    with the largest feature distance among positives (same panoptic id)
    and the smallest among negatives.  Returns (jplus, jminus, dplus,
    dminus); jplus = -1 when an anchor has no positive neighbor, in which
    case dplus = 0.
    """
    fa = f[anchor_index][:, None, :]              # [A, 1, C]
    fn = f[nbr_index]                             # [A, Kn, C]
    d = np.sqrt(((fa - fn) ** 2).sum(axis=2))     # [A, Kn]

    dpos = np.where(pos_mask, d, -np.inf)
    has_pos = pos_mask.any(axis=1)
    tp = dpos.argmax(axis=1)
    jplus = np.where(has_pos, np.take_along_axis(nbr_index, tp[:, None], 1)[:, 0], -1)
    dplus = np.where(has_pos, np.take_along_axis(d, tp[:, None], 1)[:, 0], 0.0)

    dneg = np.where(pos_mask, np.inf, d)
    tn = dneg.argmin(axis=1)
    jminus = np.take_along_axis(nbr_index, tn[:, None], 1)[:, 0]
    dminus = np.take_along_axis(d, tn[:, None], 1)[:, 0]
    return jplus.astype(np.int64), jminus.astype(np.int64), dplus, dminus


def dg_forward(f: np.ndarray, anchor_index: np.ndarray, nbr_index: np.ndarray,
               ok_mask: np.ndarray, depth: np.ndarray, tau: float):
    """Depth-to-semantic pull term and its gradient w.r.t. ``f`` [P, C].

    Returns (total, grad) where total = sum_i sum_j w_ij * exp(-|f_i-f_j|)
    with w_ij = exp(-|d_i-d_j|/tau); the caller negates and normalizes.
    """
    fa = f[anchor_index][:, None, :]
    fn = f[nbr_index]
    diff = fa - fn                                # [A, Kn, C]
    n = np.sqrt((diff ** 2).sum(axis=2))          # [A, Kn]
    w = np.exp(-np.abs(depth[anchor_index][:, None] - depth[nbr_index]) / tau)
    e = np.exp(-n)
    contrib = np.where(ok_mask, w * e, 0.0)
    total = float(contrib.sum())

    coef = np.where((n > 1e-12) & ok_mask, -contrib / np.maximum(n, 1e-12), 0.0)
    g = coef[:, :, None] * diff                   # d(total)/d f_anchor per pair
    grad = np.zeros_like(f)
    np.add.at(grad, anchor_index, g.sum(axis=1))
    np.add.at(grad, nbr_index.ravel(), -g.reshape(-1, f.shape[1]))
    return total, grad


def valid_nearest_downsample(depth: np.ndarray, valid: np.ndarray, scale: int):
    """Per-cell nearest-to-center valid pixel; cell invalid when none is.

    Averaging depth across instance boundaries would fabricate values, so
    each scale x scale cell copies one real measurement instead.
    """
    h, w = depth.shape
    hb, wb = h // scale, w // scale
    db = depth.reshape(hb, scale, wb, scale).transpose(0, 2, 1, 3).reshape(hb, wb, -1)
    vb = valid.reshape(hb, scale, wb, scale).transpose(0, 2, 1, 3).reshape(hb, wb, -1)
    c = (scale - 1) / 2.0
    dy, dx = np.mgrid[0:scale, 0:scale]
    dist = ((dy - c) ** 2 + (dx - c) ** 2).reshape(-1)
    cost = np.where(vb, dist[None, None, :], np.inf)
    k = cost.argmin(axis=2)
    out = np.take_along_axis(db, k[:, :, None], axis=2)[:, :, 0]
    ok = vb.any(axis=2)
    out = np.where(ok, out, 0.0)
    return out, ok
