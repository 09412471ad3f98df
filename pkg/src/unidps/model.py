"""Full forward / backward orchestration and parameter initialization.

Parameters are one flat ``dict[str, np.ndarray]``; initialization order is
fixed so a given seed always produces identical weights.  The forward pass
returns a ForwardBundle holding every intermediate cache plus the discrete
structures (attention masks) needed to replay it on a frozen branch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blocks import Params
from .config import ExperimentConfig
from .encoder import encode_features_bwd, encode_features_fwd, init_encoder_params
from .geometry import (DepthPrediction, aggregate_depth, backup_query_bwd,
                       backup_query_fwd, enhance_queries_bwd,
                       enhance_queries_fwd, init_geometry_params,
                       predict_segment_depths_bwd, predict_segment_depths_fwd,
                       union_attn_mask)
from .numerics import make_rng
from .scene import FeaturePyramid, Scene
from .segmentation import (LEVEL_ORDER, PanopticResult, SegPrediction,
                           forward_segmentation, backward_segmentation,
                           init_segmentation_params, panoptic_postprocess)


def init_params(cfg: ExperimentConfig) -> Params:
    rng = make_rng(cfg.seed)
    params: Params = {}
    init_encoder_params(params, cfg.model, rng)
    init_segmentation_params(params, cfg.model, rng)
    init_geometry_params(params, cfg.model, rng)
    return params


@dataclass
class ForwardBundle:
    sem_pyr: FeaturePyramid
    dep_pyr: FeaturePyramid
    enc_cache: tuple
    queries: np.ndarray
    seg_preds: list[SegPrediction]
    seg_cache: tuple
    attn_masks: list
    union_masks: list | None = None
    x_d: np.ndarray | None = None
    latent: np.ndarray | None = None
    enh_cache: tuple | None = None
    backup_q: np.ndarray | None = None
    backup_cache: tuple | None = None
    depth_pred: DepthPrediction | None = None
    depth_cache: tuple | None = None


def forward_full(image: np.ndarray, params: Params, cfg: ExperimentConfig,
                 need_depth: bool = True, frozen: dict | None = None) -> ForwardBundle:
    sem_pyr, dep_pyr, enc_cache = encode_features_fwd(image, params, cfg.model)
    frozen_masks = frozen["attn_masks"] if frozen is not None else None
    x_o, preds, seg_cache = forward_segmentation(sem_pyr, params, cfg.model, frozen_masks)
    fwd = ForwardBundle(sem_pyr, dep_pyr, enc_cache, x_o, preds, seg_cache,
                        seg_cache[2])
    if not need_depth:
        return fwd

    if frozen is not None:
        union_masks = frozen["union_masks"]
    else:
        union_masks = []
        for li in LEVEL_ORDER:
            hw = dep_pyr.levels[li].shape[1:]
            union_masks.append(union_attn_mask(preds[-1].mask_logits, hw,
                                               cfg.model.num_latents))
    fwd.union_masks = union_masks

    if cfg.enable_enhancement:
        fwd.x_d, fwd.latent, fwd.enh_cache = enhance_queries_fwd(
            x_o, dep_pyr, params, cfg.model, union_masks)
    else:
        fwd.x_d = x_o
    if cfg.enable_backup:
        fwd.backup_q, fwd.backup_cache = backup_query_fwd(dep_pyr, params, cfg.model)
    fwd.depth_pred, fwd.depth_cache = predict_segment_depths_fwd(
        fwd.x_d, fwd.backup_q, dep_pyr.embedding, params, cfg.loss.d_max)
    return fwd


def backward_full(fwd: ForwardBundle, params: Params, cfg: ExperimentConfig,
                  dclass: list[np.ndarray], dmask: list[np.ndarray],
                  dperseg: np.ndarray | None, dbackup: np.ndarray | None,
                  dsem_extra: list[np.ndarray] | None,
                  ddep_extra: list[np.ndarray] | None) -> Params:
    """Chain rule from loss-side gradients down to every parameter."""
    grads: Params = {}
    dx_final = np.zeros_like(fwd.queries)
    ddep_levels = [np.zeros_like(l) for l in fwd.dep_pyr.levels]
    de_depth = np.zeros_like(fwd.dep_pyr.embedding)

    if fwd.depth_pred is not None and dperseg is not None:
        dx_d, dbq, de_depth = predict_segment_depths_bwd(
            grads, dperseg, dbackup, fwd.dep_pyr.embedding, fwd.depth_cache)
        if cfg.enable_enhancement:
            dx_o_geo, dlv = enhance_queries_bwd(
                grads, dx_d, np.zeros_like(fwd.latent), fwd.dep_pyr, fwd.enh_cache)
        else:
            dx_o_geo, dlv = dx_d, None
        dx_final += dx_o_geo
        if dlv is not None:
            for i in range(3):
                ddep_levels[i] += dlv[i]
        if fwd.backup_q is not None and dbq is not None:
            dlv = backup_query_bwd(grads, dbq, fwd.dep_pyr, fwd.backup_cache)
            for i in range(3):
                ddep_levels[i] += dlv[i]

    dsem_pyr = backward_segmentation(grads, dclass, dmask, dx_final,
                                     fwd.sem_pyr, fwd.seg_cache)
    if dsem_extra is not None:
        for i in range(3):
            dsem_pyr.levels[i] += dsem_extra[i]
    if ddep_extra is not None:
        for i in range(3):
            ddep_levels[i] += ddep_extra[i]
    ddep_pyr = FeaturePyramid(ddep_levels, de_depth)
    encode_features_bwd(grads, dsem_pyr, ddep_pyr, fwd.enc_cache)
    return grads


@dataclass
class Inference:
    panres: PanopticResult
    depth: "DepthMap"
    pred: SegPrediction
    fwd: ForwardBundle


def predict(scene: Scene, params: Params, cfg: ExperimentConfig) -> Inference:
    """Forward pass plus post-processing into panoptic + depth outputs."""
    fwd = forward_full(scene.image, params, cfg, need_depth=True)
    full_hw = (scene.height, scene.width)
    panres = panoptic_postprocess(fwd.seg_preds[-1], full_hw, cfg.model.num_classes)
    depth = aggregate_depth(fwd.depth_pred, panres, full_hw)
    return Inference(panres, depth, fwd.seg_preds[-1], fwd)
