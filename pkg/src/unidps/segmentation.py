"""Mask-classification head over unified per-segment queries.

The decoder runs ``decoder_layers`` pre-norm transformer layers, cycling the
pyramid coarse-to-fine (1/32 -> 1/16 -> 1/8).  Cross-attention of layer j is
masked by the binarized mask prediction of layer j-1 (layer 0 attends
everywhere); a query whose mask is empty at the layer's resolution also
attends everywhere.  Shared heads after every layer produce class logits and
mask logits (query embedding dotted with the 1/4 pixel embedding), giving
the per-layer predictions used for deep supervision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import (Params, attn_sub_bwd, attn_sub_fwd, ffn_sub_bwd,
                     ffn_sub_fwd, gacc, init_attn, init_ffn, init_linear,
                     init_norm, lin_bwd, lin_fwd, mlp2_bwd, mlp2_fwd,
                     mlp2_init, norm_bwd, norm_fwd, self_sub_bwd,
                     self_sub_fwd)
from .config import ModelConfig
from .numerics import bilinear_resize, nearest_index, sigmoid, sine_posenc, softmax
from .scene import (FeaturePyramid, PanopticMap, is_thing, segment_id)

# decoder layer j attends to pyramid level LEVEL_ORDER[j % 3]
# (pyramid levels are stored fine->coarse: index 0 = 1/8, 2 = 1/32)
LEVEL_ORDER = (2, 1, 0)

CONFIDENCE_THRESHOLD = 0.5
MASK_THRESHOLD = 0.5
MIN_SEGMENT_AREA = 32


@dataclass
class SegPrediction:
    class_logits: np.ndarray   # [N, K+1]
    class_probs: np.ndarray    # [N, K+1], rows sum to 1
    mask_logits: np.ndarray    # [N, H/4, W/4]


@dataclass
class PanopticResult:
    panoptic: PanopticMap
    kept_query_ids: list[int]
    per_query_confidence: np.ndarray   # [N]
    query_map: np.ndarray              # [H, W] int32, index of owning query, -1 = none
    query_category: dict[int, int]     # kept query index -> category id


def init_segmentation_params(params: Params, cfg: ModelConfig,
                             rng: np.random.Generator) -> None:
    c = cfg.channels
    params["seg.query_init"] = rng.normal(0.0, 1.0, size=(cfg.num_queries, c))
    for j in range(cfg.decoder_layers):
        init_attn(params, f"seg.layer{j}.cross", c, rng)
        init_attn(params, f"seg.layer{j}.self", c, rng)
        init_ffn(params, f"seg.layer{j}.ffn", c, cfg.ffn_hidden, rng)
    init_norm(params, "seg.head.ln", c)
    init_linear(params, "seg.head.cls", c, cfg.num_classes + 1, rng)
    mlp2_init(params, "seg.head.mask", c, c, cfg.embed_channels, rng)


def attn_mask_from_logits(mask_logits: np.ndarray, level_hw: tuple[int, int]) -> np.ndarray:
    """[N, h4, w4] logits -> boolean [N, h*w] attention mask at a level.

    True = attend.  Binarization at probability 0.5 (logit 0); the
    all-false fallback is applied inside the attention primitive.
    """
    binary = mask_logits > 0.0
    iy = nearest_index(binary.shape[1], level_hw[0])
    ix = nearest_index(binary.shape[2], level_hw[1])
    return binary[:, iy[:, None], ix[None, :]].reshape(binary.shape[0], -1)


def _head_fwd(params: Params, x: np.ndarray, e_pixel: np.ndarray):
    xn, c_ln = norm_fwd(params, "seg.head.ln", x)
    class_logits, c_cls = lin_fwd(params, "seg.head.cls", xn)
    memb, c_m = mlp2_fwd(params, "seg.head.mask", xn)
    mask_logits = np.einsum("ne,ehw->nhw", memb, e_pixel)
    pred = SegPrediction(class_logits, softmax(class_logits, axis=1), mask_logits)
    return pred, (c_ln, c_cls, c_m, memb)


def _head_bwd(grads: Params, dclass_logits: np.ndarray, dmask_logits: np.ndarray,
              e_pixel: np.ndarray, de_pixel: np.ndarray, cache) -> np.ndarray:
    c_ln, c_cls, c_m, memb = cache
    dmemb = np.einsum("nhw,ehw->ne", dmask_logits, e_pixel)
    de_pixel += np.einsum("nhw,ne->ehw", dmask_logits, memb)
    dxn = mlp2_bwd(grads, "seg.head.mask", dmemb, c_m)
    dxn += lin_bwd(grads, "seg.head.cls", dclass_logits, c_cls)
    return norm_bwd(grads, "seg.head.ln", dxn, c_ln)


def decoder_layer_fwd(params: Params, key: str, x: np.ndarray,
                      level: np.ndarray, attn_mask: np.ndarray | None):
    """One decoder layer against a channels-first [C, h, w] level."""
    c, h, w = level.shape
    feat = level.reshape(c, -1).T
    pos = sine_posenc(h, w, c)
    x, c_cross = attn_sub_fwd(params, f"{key}.cross", x, feat, pos, attn_mask)
    x, c_self = self_sub_fwd(params, f"{key}.self", x)
    x, c_ffn = ffn_sub_fwd(params, f"{key}.ffn", x)
    return x, (c_cross, c_self, c_ffn, (c, h, w))


def decoder_layer_bwd(grads: Params, key: str, dx: np.ndarray, cache):
    c_cross, c_self, c_ffn, (c, h, w) = cache
    dx = ffn_sub_bwd(grads, f"{key}.ffn", dx, c_ffn)
    dx = self_sub_bwd(grads, f"{key}.self", dx, c_self)
    dx, dfeat = attn_sub_bwd(grads, f"{key}.cross", dx, c_cross)
    return dx, dfeat.T.reshape(c, h, w)


def forward_segmentation(pyr: FeaturePyramid, params: Params, cfg: ModelConfig,
                         frozen_masks: list | None = None):
    """Runs the decoder stack; returns (final queries, predictions, cache).

    ``predictions[j]`` is the head output after layer j; the last entry is
    the final prediction.  ``frozen_masks`` (from a previous run) replaces
    the mask-logit binarization, which keeps the forward pass inside one
    smooth branch during finite-difference checks.
    """
    x = params["seg.query_init"].copy()
    preds: list[SegPrediction] = []
    layer_caches = []
    head_caches = []
    used_masks = []
    for j in range(cfg.decoder_layers):
        level = pyr.levels[LEVEL_ORDER[j % 3]]
        if frozen_masks is not None:
            mask = frozen_masks[j]
        elif j == 0:
            mask = None
        else:
            mask = attn_mask_from_logits(preds[-1].mask_logits, level.shape[1:])
        used_masks.append(mask)
        x, lc = decoder_layer_fwd(params, f"seg.layer{j}", x, level, mask)
        pred, hc = _head_fwd(params, x, pyr.embedding)
        preds.append(pred)
        layer_caches.append(lc)
        head_caches.append(hc)
    cache = (layer_caches, head_caches, used_masks)
    return x, preds, cache


def backward_segmentation(grads: Params, dclass_logits: list[np.ndarray],
                          dmask_logits: list[np.ndarray],
                          dx_final: np.ndarray, pyr: FeaturePyramid, cache):
    """Backward through the decoder stack.

    ``dclass_logits`` / ``dmask_logits`` hold one gradient per layer (zeros
    allowed); ``dx_final`` is the gradient flowing into the final queries
    from downstream consumers (the geometry module).  Returns a
    FeaturePyramid-shaped gradient for the semantic pyramid.
    """
    layer_caches, head_caches, _ = cache
    n_layers = len(layer_caches)
    dlevels = [np.zeros_like(l) for l in pyr.levels]
    de_pixel = np.zeros_like(pyr.embedding)
    dx = dx_final.copy()
    for j in range(n_layers - 1, -1, -1):
        dx += _head_bwd(grads, dclass_logits[j], dmask_logits[j],
                        pyr.embedding, de_pixel, head_caches[j])
        dx, dlevel = decoder_layer_bwd(grads, f"seg.layer{j}", dx, layer_caches[j])
        dlevels[LEVEL_ORDER[j % 3]] += dlevel
    gacc(grads, "seg.query_init", dx)
    return FeaturePyramid(dlevels, de_pixel)


# ---------------------------------------------------------------------------
# post-processing


def panoptic_postprocess(pred: SegPrediction, full_hw: tuple[int, int],
                         num_classes: int) -> PanopticResult:
    """Confidence-filtered per-pixel argmax assignment, Mask2Former style.

    Queries scoring below 0.5 on every real class, or whose most likely
    class is no-object, are removed.  Each full-resolution pixel goes to the
    kept query maximizing score * mask probability; pixels whose winning
    mask probability is not above 0.5, and queries keeping fewer than
    MIN_SEGMENT_AREA pixels, become void.  Kept stuff queries of one
    category merge into a single segment.
    """
    h_full, w_full = full_hw
    n = pred.class_probs.shape[0]
    real_probs = pred.class_probs[:, :num_classes]
    scores = real_probs.max(axis=1)
    classes = real_probs.argmax(axis=1)
    argmax_all = pred.class_probs.argmax(axis=1)
    candidates = np.flatnonzero((scores >= CONFIDENCE_THRESHOLD)
                                & (argmax_all != num_classes))

    id_map = np.zeros((h_full, w_full), dtype=np.int32)
    query_map = np.full((h_full, w_full), -1, dtype=np.int32)
    result = PanopticResult(PanopticMap(h_full, w_full, id_map, []),
                            [], scores, query_map, {})
    if candidates.size == 0:
        return result

    maskp = np.stack([
        bilinear_resize(sigmoid(pred.mask_logits[q]), full_hw) for q in candidates
    ])
    weighted = scores[candidates][:, None, None] * maskp
    winner = weighted.argmax(axis=0)
    rows, cols = np.indices(full_hw)
    win_prob = maskp[winner, rows, cols]
    assigned = win_prob > MASK_THRESHOLD

    kept = []
    for i, q in enumerate(candidates):
        area = int(np.count_nonzero(assigned & (winner == i)))
        if area >= MIN_SEGMENT_AREA:
            kept.append((i, int(q)))

    segments: dict[int, tuple[int, bool]] = {}
    instance_counter: dict[int, int] = {}
    for i, q in kept:
        cat = int(classes[q]) + 1  # categories are 1-based
        if is_thing(cat):
            instance_counter[cat] = instance_counter.get(cat, 0) + 1
            sid = segment_id(cat, instance_counter[cat])
        else:
            sid = segment_id(cat, 0)
        segments[sid] = (cat, is_thing(cat))
        sel = assigned & (winner == i)
        id_map[sel] = sid
        query_map[sel] = q
        result.kept_query_ids.append(q)
        result.query_category[q] = cat

    result.panoptic.segments = [(sid, cat, thing)
                                for sid, (cat, thing) in sorted(segments.items())]
    return result
