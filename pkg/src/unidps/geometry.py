"""Geometric query enhancement, backup query, and depth map assembly.

A small set of latent tokens acts as a middleware between the depth
pyramid and the per-segment queries: per pyramid level (coarse to fine)
the latent cross-attends to the masked depth features, self-attends, and
is then read by the query stream to produce geometry-enhanced queries.
The original queries are never modified, so enabling this module cannot
change segmentation outputs.

A single backup query reads the depth pyramid without any mask and yields
a global depth map used to fill pixels that post-processing left void.
Per-segment depth is ``D_max * sigmoid(psi(query) . E_depth)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import (Params, attn_sub_bwd, attn_sub_fwd, ffn_sub_bwd,
                     ffn_sub_fwd, gacc, init_attn, init_ffn, init_norm,
                     mlp2_bwd, mlp2_fwd, mlp2_init, norm_bwd, norm_fwd,
                     self_sub_bwd, self_sub_fwd)
from .config import ModelConfig
from .numerics import bilinear_resize, nearest_index, sigmoid, sine_posenc
from .scene import D_MAX, DepthMap, FeaturePyramid
from .segmentation import LEVEL_ORDER, PanopticResult


@dataclass
class DepthPrediction:
    per_segment_depth: np.ndarray        # [N, H/4, W/4], meters in (0, D_max)
    backup_depth: np.ndarray | None      # [H/4, W/4]


def init_geometry_params(params: Params, cfg: ModelConfig,
                         rng: np.random.Generator) -> None:
    c = cfg.channels
    params["geo.latent_init"] = rng.normal(0.0, 1.0, size=(cfg.num_latents, c))
    params["geo.backup_init"] = rng.normal(0.0, 1.0, size=(1, c))
    for b in range(3):
        init_attn(params, f"geo.block{b}.feat", c, rng)
        init_attn(params, f"geo.block{b}.lat", c, rng)
        init_attn(params, f"geo.block{b}.read", c, rng)
        init_attn(params, f"geo.backup{b}", c, rng)
    init_ffn(params, "geo.backup_ffn", c, cfg.ffn_hidden, rng)
    init_norm(params, "geo.head.ln", c)
    mlp2_init(params, "geo.psi", c, c, cfg.depth_channels, rng)


def union_attn_mask(mask_logits: np.ndarray, level_hw: tuple[int, int],
                    rows: int) -> np.ndarray:
    """Union over queries of binarized masks, as a [rows, h*w] bool mask."""
    union4 = (mask_logits > 0.0).any(axis=0)
    iy = nearest_index(union4.shape[0], level_hw[0])
    ix = nearest_index(union4.shape[1], level_hw[1])
    flat = union4[np.ix_(iy, ix)].reshape(-1)
    return np.broadcast_to(flat, (rows, flat.size))


def enhance_queries_fwd(x_o: np.ndarray, depth_pyr: FeaturePyramid,
                        params: Params, cfg: ModelConfig,
                        union_masks: list[np.ndarray | None]):
    """Returns (x_d, latent, cache).  ``union_masks[b]`` masks block b's
    latent cross-attention (None = unmasked)."""
    latent = params["geo.latent_init"].copy()
    x_d = x_o.copy()
    caches = []
    for b, li in enumerate(LEVEL_ORDER):
        level = depth_pyr.levels[li]
        c, h, w = level.shape
        feat = level.reshape(c, -1).T
        pos = sine_posenc(h, w, c)
        latent, c_feat = attn_sub_fwd(params, f"geo.block{b}.feat", latent,
                                      feat, pos, union_masks[b])
        latent, c_lat = self_sub_fwd(params, f"geo.block{b}.lat", latent)
        x_d, c_read = attn_sub_fwd(params, f"geo.block{b}.read", x_d, latent)
        caches.append((c_feat, c_lat, c_read, (c, h, w)))
    return x_d, latent, caches


def enhance_queries_bwd(grads: Params, dx_d: np.ndarray, dlatent: np.ndarray,
                        depth_pyr: FeaturePyramid, caches):
    """Returns (dx_o, pyramid-level grads)."""
    dlevels = [np.zeros_like(l) for l in depth_pyr.levels]
    dx = dx_d.copy()
    dlat = dlatent.copy()
    for b in range(len(caches) - 1, -1, -1):
        c_feat, c_lat, c_read, (c, h, w) = caches[b]
        dx, dlat_read = attn_sub_bwd(grads, f"geo.block{b}.read", dx, c_read)
        dlat = dlat + dlat_read
        dlat = self_sub_bwd(grads, f"geo.block{b}.lat", dlat, c_lat)
        dlat, dfeat = attn_sub_bwd(grads, f"geo.block{b}.feat", dlat, c_feat)
        dlevels[LEVEL_ORDER[b]] += dfeat.T.reshape(c, h, w)
    gacc(grads, "geo.latent_init", dlat)
    return dx, dlevels


def backup_query_fwd(depth_pyr: FeaturePyramid, params: Params, cfg: ModelConfig):
    bq = params["geo.backup_init"].copy()
    caches = []
    for b, li in enumerate(LEVEL_ORDER):
        level = depth_pyr.levels[li]
        c, h, w = level.shape
        feat = level.reshape(c, -1).T
        pos = sine_posenc(h, w, c)
        bq, c_attn = attn_sub_fwd(params, f"geo.backup{b}", bq, feat, pos, None)
        caches.append((c_attn, (c, h, w)))
    bq, c_ffn = ffn_sub_fwd(params, "geo.backup_ffn", bq)
    return bq, (caches, c_ffn)


def backup_query_bwd(grads: Params, dbq: np.ndarray, depth_pyr: FeaturePyramid,
                     cache):
    caches, c_ffn = cache
    dlevels = [np.zeros_like(l) for l in depth_pyr.levels]
    d = ffn_sub_bwd(grads, "geo.backup_ffn", dbq, c_ffn)
    for b in range(len(caches) - 1, -1, -1):
        c_attn, (c, h, w) = caches[b]
        d, dfeat = attn_sub_bwd(grads, f"geo.backup{b}", d, c_attn)
        dlevels[LEVEL_ORDER[b]] += dfeat.T.reshape(c, h, w)
    gacc(grads, "geo.backup_init", d)
    return dlevels


def predict_segment_depths_fwd(x_d: np.ndarray, backup: np.ndarray | None,
                               e_depth: np.ndarray, params: Params,
                               d_max: float = D_MAX):
    """d_i(u,v) = d_max * sigmoid(psi(norm(x_d_i)) . E_depth[:, u, v])."""
    xn, c_ln = norm_fwd(params, "geo.head.ln", x_d)
    z, c_psi = mlp2_fwd(params, "geo.psi", xn)
    logits = np.einsum("nd,dhw->nhw", z, e_depth)
    depth = d_max * sigmoid(logits)
    cache_b = None
    bdepth = None
    if backup is not None:
        bn, c_bln = norm_fwd(params, "geo.head.ln", backup)
        zb, c_bpsi = mlp2_fwd(params, "geo.psi", bn)
        blogits = np.einsum("nd,dhw->nhw", zb, e_depth)
        bdepth = d_max * sigmoid(blogits)[0]
        cache_b = (c_bln, c_bpsi, zb, bdepth)
    pred = DepthPrediction(depth, bdepth)
    return pred, (c_ln, c_psi, z, depth, cache_b, d_max)


def predict_segment_depths_bwd(grads: Params, ddepth: np.ndarray,
                               dbackup: np.ndarray | None,
                               e_depth: np.ndarray, cache):
    """Returns (dx_d, dbackup_query, de_depth)."""
    c_ln, c_psi, z, depth, cache_b, d_max = cache
    de_depth = np.zeros_like(e_depth)
    dlogits = ddepth * depth * (1.0 - depth / d_max)
    dz = np.einsum("nhw,dhw->nd", dlogits, e_depth)
    de_depth += np.einsum("nhw,nd->dhw", dlogits, z)
    dxn = mlp2_bwd(grads, "geo.psi", dz, c_psi)
    dx_d = norm_bwd(grads, "geo.head.ln", dxn, c_ln)
    dbq = None
    if cache_b is not None:
        c_bln, c_bpsi, zb, bdepth = cache_b
        db = np.zeros((1,) + bdepth.shape) if dbackup is None else dbackup[None]
        dblogits = db * bdepth * (1.0 - bdepth / d_max)
        dzb = np.einsum("nhw,dhw->nd", dblogits, e_depth)
        de_depth += np.einsum("nhw,nd->dhw", dblogits, zb)
        dbn = mlp2_bwd(grads, "geo.psi", dzb, c_bpsi)
        dbq = norm_bwd(grads, "geo.head.ln", dbn, c_bln)
    return dx_d, dbq, de_depth


def aggregate_depth(depth_pred: DepthPrediction, panres: PanopticResult,
                    full_hw: tuple[int, int]) -> DepthMap:
    """Per-pixel owner's depth map, backup-filled where no query owns a pixel.

    Without a backup map, uncovered pixels get D_max and are marked invalid.
    """
    h, w = full_hw
    if depth_pred.backup_depth is not None:
        out = bilinear_resize(depth_pred.backup_depth, full_hw)
        valid = np.ones(full_hw, dtype=bool)
    else:
        out = np.full(full_hw, D_MAX)
        valid = panres.query_map >= 0
    for q in panres.kept_query_ids:
        sel = panres.query_map == q
        if sel.any():
            out[sel] = bilinear_resize(depth_pred.per_segment_depth[q], full_hw)[sel]
    return DepthMap(h, w, out, valid)
