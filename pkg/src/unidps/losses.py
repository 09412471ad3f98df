"""Bipartite matching and the full training loss stack with analytic gradients.

Pieces:
  * ``hungarian_match``: exact minimum-cost one-to-one assignment.
  * ``loss_cls`` / ``loss_mask``: weighted cross-entropy and BCE + soft dice
    over matched query/segment pairs.
  * ``loss_depth``: scale-invariant log loss, applied per matched segment
    and to the backup depth map.
  * ``semantic_guidance`` (triplet over hardest pairs in K x K patches of
    the depth features) and ``depth_guidance`` (exponential pull between
    semantic features of depth-similar pixels), each averaged over the
    pyramid levels that contain usable patches.
  * ``total_loss``: gates terms by annotation mode, assembles the weighted
    sum, and drives the hand-written backward pass through every module.

Every loss returns analytic gradients; ``structures`` captured from a call
can be passed back in to freeze the discrete choices (assignments, mined
pixels, attention masks), which keeps finite-difference checks on a single
smooth branch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .config import ExperimentConfig
from .numerics import bilinear_resize_bwd, bilinear_resize_fwd, nearest_resize, sigmoid, softmax
from .scene import Scene

_TINY = 1e-12
NORM_EPS = 1e-8


# ---------------------------------------------------------------------------
# bipartite matching


@dataclass
class MatchResult:
    assignment: list[tuple[int, int]]   # (query_index, gt_index), injective
    unmatched_queries: list[int]
    total_cost: float


def _lap(cost: np.ndarray) -> np.ndarray:
    """Shortest-augmenting-path assignment for cost[n, m] with n <= m.

    Returns col index per row.  Ties resolve toward lower indices since
    scans run in ascending order with strict improvement.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    matched = np.full(m + 1, n, dtype=int)   # col -> row, n = free; col m is virtual
    way = np.zeros(m + 1, dtype=int)
    for i in range(n):
        matched[m] = i
        j0 = m
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = matched[j0]
            delta = np.inf
            j1 = -1
            for j in range(m):
                if used[j]:
                    continue
                cur = cost[i0, j] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[matched[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if matched[j0] == n:
                break
        while j0 != m:
            j1 = way[j0]
            matched[j0] = matched[j1]
            j0 = j1
    row_to_col = np.full(n, -1, dtype=int)
    for j in range(m):
        if matched[j] != n:
            row_to_col[matched[j]] = j
    return row_to_col


def hungarian_match(cost: np.ndarray) -> MatchResult:
    """Minimum-total-cost one-to-one assignment of queries to GT segments."""
    if not np.all(np.isfinite(cost)):
        raise ValueError("matching cost matrix contains non-finite entries")
    n, g = cost.shape
    if g == 0 or n == 0:
        return MatchResult([], list(range(n)), 0.0)
    if n <= g:
        q_to_g = _lap(cost)
        pairs = [(q, int(q_to_g[q])) for q in range(n)]
    else:
        g_to_q = _lap(cost.T)
        pairs = sorted((int(g_to_q[j]), j) for j in range(g))
    total = float(sum(cost[q, j] for q, j in pairs))
    matched_q = {q for q, _ in pairs}
    unmatched = [q for q in range(n) if q not in matched_q]
    return MatchResult(pairs, unmatched, total)


# ---------------------------------------------------------------------------
# classification / mask losses


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def loss_cls(class_logits: np.ndarray, targets: np.ndarray, empty_class: int,
             empty_weight: float):
    """Weighted mean NLL; unmatched queries target the no-object class."""
    p = softmax(class_logits, axis=1)
    n = class_logits.shape[0]
    w = np.where(targets == empty_class, empty_weight, 1.0)
    picked = p[np.arange(n), targets]
    loss = float(np.sum(w * -np.log(np.maximum(picked, _TINY))) / np.sum(w))
    dlogits = p.copy()
    dlogits[np.arange(n), targets] -= 1.0
    dlogits *= (w / np.sum(w))[:, None]
    return loss, dlogits


def loss_mask(mask_logits: np.ndarray, gt_masks: np.ndarray,
              assignment: list[tuple[int, int]]):
    """Mean over matched pairs of (pixel-mean BCE + soft dice, eps = 1)."""
    dlogits = np.zeros_like(mask_logits)
    if not assignment:
        return 0.0, 0.0, dlogits
    n_pix = mask_logits.shape[1] * mask_logits.shape[2]
    bce_total = 0.0
    dice_total = 0.0
    for q, g in assignment:
        x = mask_logits[q]
        m = gt_masks[g].astype(float)
        p = sigmoid(x)
        bce_total += float(np.mean(_softplus(x) - x * m))
        dx = (p - m) / n_pix
        s_p, s_g, s_pg = p.sum(), m.sum(), (p * m).sum()
        denom = s_p + s_g + 1.0
        dice_total += 1.0 - (2.0 * s_pg + 1.0) / denom
        dp = -(2.0 * m * denom - (2.0 * s_pg + 1.0)) / denom ** 2
        dx = dx + dp * p * (1.0 - p)
        dlogits[q] += dx / len(assignment)
    k = len(assignment)
    return bce_total / k, dice_total / k, dlogits


def match_cost(pred, gt_cats_idx: np.ndarray, gt_masks: np.ndarray,
               w_cls: float, w_mask: float) -> np.ndarray:
    """[N, G] matching cost: -p(class) plus all-pixel BCE + dice."""
    n = pred.class_probs.shape[0]
    g = len(gt_cats_idx)
    n_pix = pred.mask_logits.shape[1] * pred.mask_logits.shape[2]
    x = pred.mask_logits.reshape(n, -1)
    mg = gt_masks.reshape(g, -1).astype(float)
    c_cls = -pred.class_probs[:, gt_cats_idx]
    sp_sum = _softplus(x).sum(axis=1)
    bce = (sp_sum[:, None] - x @ mg.T) / n_pix
    p = sigmoid(x)
    inter = p @ mg.T
    dice = 1.0 - (2.0 * inter + 1.0) / (p.sum(axis=1)[:, None] + mg.sum(axis=1)[None, :] + 1.0)
    return w_cls * c_cls + w_mask * (bce + dice)


# ---------------------------------------------------------------------------
# scale-invariant depth loss


def loss_depth(d: np.ndarray, d_hat: np.ndarray, si_lambda: float):
    """Scale-invariant log loss over flat positive arrays of equal length.

    L = mean(g^2) - si_lambda * mean(g)^2 with g = log d - log d_hat.
    Returns (value, dL/dd); (0, None) when the pixel set is empty.
    """
    n = d.size
    if n == 0:
        return 0.0, None
    g = np.log(d) - np.log(d_hat)
    mg = g.mean()
    loss = float((g * g).mean() - si_lambda * mg * mg)
    dd = (2.0 * g / n - 2.0 * si_lambda * mg / n) / d
    return loss, dd


# ---------------------------------------------------------------------------
# patch index


@dataclass
class PatchIndex:
    """Anchors and K x K neighborhoods for the guidance losses.

    ``nbr_index`` enumerates the window row-major, center excluded; for the
    semantic kind ``pos_mask`` marks same-panoptic-id neighbors (the rest
    are negatives), for the depth kind ``ok_mask`` marks neighbors with
    valid depth.
    """
    patch_size: int
    shape: tuple[int, int]
    anchor_index: np.ndarray          # [A] flat indices
    nbr_index: np.ndarray             # [A, K*K-1] flat indices
    pos_mask: np.ndarray | None = None
    ok_mask: np.ndarray | None = None

    @property
    def num_anchors(self) -> int:
        return int(self.anchor_index.size)

    @property
    def pos_counts(self) -> np.ndarray:
        return self.pos_mask.sum(axis=1)

    @property
    def neg_counts(self) -> np.ndarray:
        return (~self.pos_mask).sum(axis=1)


def _window_grid(h: int, w: int, k: int):
    if k % 2 == 0 or k < 3:
        raise ValueError(f"patch size must be odd and >= 3, got {k}")
    if k > min(h, w):
        raise ValueError(f"patch size {k} exceeds map size {h}x{w}")
    r = k // 2
    ys, xs = np.mgrid[r:h - r, r:w - r]
    anchor = (ys * w + xs).reshape(-1)
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    offs = (dy * w + dx).reshape(-1)
    offs = offs[offs != 0]
    return anchor.astype(np.int64), (anchor[:, None] + offs[None, :]).astype(np.int64)


def semantic_patch_index(ids: np.ndarray, k: int) -> PatchIndex:
    """Anchors with at least one cross-boundary neighbor in their window."""
    h, w = ids.shape
    anchor, nbr = _window_grid(h, w, k)
    flat = ids.reshape(-1)
    pos = flat[nbr] == flat[anchor][:, None]
    keep = (~pos).any(axis=1)
    return PatchIndex(k, (h, w), anchor[keep], nbr[keep], pos_mask=pos[keep])


def depth_patch_index(valid: np.ndarray, k: int) -> PatchIndex:
    """Anchors with valid depth and at least one valid-depth neighbor."""
    h, w = valid.shape
    anchor, nbr = _window_grid(h, w, k)
    flat = valid.reshape(-1)
    ok = flat[nbr]
    keep = flat[anchor] & ok.any(axis=1)
    return PatchIndex(k, (h, w), anchor[keep], nbr[keep], ok_mask=ok[keep])


def build_patch_index(gt_map: np.ndarray, k: int, kind: str = "semantic") -> PatchIndex:
    if kind == "semantic":
        return semantic_patch_index(gt_map, k)
    if kind == "depth":
        return depth_patch_index(gt_map.astype(bool), k)
    raise ValueError(f"unknown patch index kind {kind!r}")


# ---------------------------------------------------------------------------
# guidance losses


def _normalize_rows(f: np.ndarray):
    nrm = np.sqrt((f * f).sum(axis=1, keepdims=True))
    fhat = f / (nrm + NORM_EPS)
    return fhat, nrm


def _normalize_rows_bwd(dfhat: np.ndarray, f: np.ndarray, nrm: np.ndarray) -> np.ndarray:
    s = 1.0 / (nrm + NORM_EPS)
    proj = (dfhat * f).sum(axis=1, keepdims=True)
    return dfhat * s - f * (proj / (np.maximum(nrm, 1e-30) * (nrm + NORM_EPS) ** 2))


def semantic_guidance_level(level: np.ndarray, ids: np.ndarray, k: int,
                            alpha: float, frozen_mining=None):
    """Triplet loss on one [C, h, w] depth-feature level.

    Returns (loss, dlevel, mining, num_anchors); num_anchors = 0 flags an
    unusable level.  ``frozen_mining`` replays stored (anchor, j+, j-)
    picks instead of re-mining.
    """
    c, h, w = level.shape
    if frozen_mining is None and k <= min(h, w):
        idx = semantic_patch_index(nearest_resize(ids, (h, w)), k)
        if idx.num_anchors == 0:
            return 0.0, np.zeros_like(level), None, 0
        f = np.ascontiguousarray(level.reshape(c, -1).T)
        fhat, nrm = _normalize_rows(f)
        jplus, jminus, _, _ = kernels.sg_mine(fhat, idx.anchor_index,
                                              idx.nbr_index, idx.pos_mask)
        mining = (idx.anchor_index, jplus, jminus)
    elif frozen_mining is None:
        return 0.0, np.zeros_like(level), None, 0
    else:
        mining = frozen_mining
        if mining is None:
            return 0.0, np.zeros_like(level), None, 0
        f = np.ascontiguousarray(level.reshape(c, -1).T)
        fhat, nrm = _normalize_rows(f)

    anchor, jplus, jminus = mining
    a = anchor.size
    fa = fhat[anchor]
    has_p = jplus >= 0
    dplus = np.zeros(a)
    diff_p = np.zeros_like(fa)
    if has_p.any():
        diff_p[has_p] = fa[has_p] - fhat[jplus[has_p]]
        dplus[has_p] = np.sqrt((diff_p[has_p] ** 2).sum(axis=1))
    diff_n = fa - fhat[jminus]
    dminus = np.sqrt((diff_n ** 2).sum(axis=1))

    margin = alpha + dplus - dminus
    active = margin > 0.0
    loss = float(np.maximum(margin, 0.0).mean())

    dfhat = np.zeros_like(fhat)
    scale = 1.0 / a
    sel = active & has_p & (dplus > _TINY)
    if sel.any():
        u = diff_p[sel] / dplus[sel, None] * scale
        np.add.at(dfhat, anchor[sel], u)
        np.add.at(dfhat, jplus[sel], -u)
    sel = active & (dminus > _TINY)
    if sel.any():
        v = diff_n[sel] / dminus[sel, None] * scale
        np.add.at(dfhat, anchor[sel], -v)
        np.add.at(dfhat, jminus[sel], v)
    df = _normalize_rows_bwd(dfhat, f, nrm)
    return loss, df.T.reshape(c, h, w), mining, a


def loss_semantic_guidance(levels: list[np.ndarray], id_map: np.ndarray, k: int,
                           alpha: float, frozen=None):
    """Mean over pyramid levels with usable patches; skips empty levels."""
    per_level = []
    for li, level in enumerate(levels):
        fm = None if frozen is None else frozen[li]
        per_level.append(semantic_guidance_level(level, id_map, k, alpha, fm))
    used = [r for r in per_level if r[3] > 0]
    minings = [r[2] for r in per_level]
    if not used:
        return 0.0, [np.zeros_like(l) for l in levels], minings
    scale = 1.0 / len(used)
    loss = sum(r[0] for r in used) * scale
    dlevels = [r[1] * scale if r[3] > 0 else r[1] for r in per_level]
    return float(loss), dlevels, minings


def depth_guidance_level(level: np.ndarray, depth: np.ndarray, valid: np.ndarray,
                         k: int, tau: float):
    """Exponential pull on one [C, h, w] semantic-feature level.

    ``depth``/``valid`` are already at the level's resolution.  Returns
    (loss, dlevel, num_anchors); loss <= 0.
    """
    c, h, w = level.shape
    if k > min(h, w):
        return 0.0, np.zeros_like(level), 0
    idx = depth_patch_index(valid, k)
    if idx.num_anchors == 0:
        return 0.0, np.zeros_like(level), 0
    f = np.ascontiguousarray(level.reshape(c, -1).T)
    total, grad = kernels.dg_forward(f, idx.anchor_index, idx.nbr_index,
                                     idx.ok_mask, depth.reshape(-1), tau)
    a = idx.num_anchors
    loss = -total / a
    dlevel = (-grad / a).T.reshape(c, h, w)
    return float(loss), dlevel, a


def loss_depth_guidance(levels: list[np.ndarray], depth_full: np.ndarray,
                        valid_full: np.ndarray, k: int, tau: float):
    per_level = []
    for level in levels:
        scale = depth_full.shape[0] // level.shape[1]
        d_small, v_small = kernels.valid_nearest_downsample(depth_full, valid_full, scale)
        per_level.append(depth_guidance_level(level, d_small, v_small, k, tau))
    used = [r for r in per_level if r[2] > 0]
    if not used:
        return 0.0, [np.zeros_like(l) for l in levels]
    scale = 1.0 / len(used)
    loss = sum(r[0] for r in used) * scale
    dlevels = [r[1] * scale if r[2] > 0 else r[1] for r in per_level]
    return float(loss), dlevels


# ---------------------------------------------------------------------------
# total loss


@dataclass
class LossReport:
    l_cls: float = 0.0
    l_ce: float = 0.0
    l_dice: float = 0.0
    l_mask: float = 0.0
    l_depth: float = 0.0
    l_sg: float = 0.0
    l_dg: float = 0.0
    total: float = 0.0

    def to_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in
                ("l_cls", "l_ce", "l_dice", "l_mask", "l_depth", "l_sg", "l_dg", "total")}


def active_terms(annotation_mode: str, cfg: ExperimentConfig,
                 seg_only: bool = False) -> dict[str, bool]:
    """Which loss terms apply for a scene, per annotation mode and toggles."""
    t = {
        "cls": annotation_mode != "depth_only",
        "mask": annotation_mode != "depth_only",
        "depth": annotation_mode != "panoptic_only",
        "sg": cfg.enable_sg and annotation_mode != "depth_only",
        "dg": cfg.enable_dg and annotation_mode != "panoptic_only",
    }
    if seg_only:
        t["depth"] = t["sg"] = t["dg"] = False
    return t


@dataclass
class SceneTargets:
    cats_idx: np.ndarray          # [G] 0-based class indices
    masks4: np.ndarray            # [G, H/4, W/4] bool
    masks_full: np.ndarray        # [G, H, W] bool
    depth: np.ndarray             # [H, W]
    valid: np.ndarray             # [H, W] bool


def scene_targets(scene: Scene) -> SceneTargets:
    ids = scene.panoptic_gt.id_map
    h, w = ids.shape
    id4 = nearest_resize(ids, (h // 4, w // 4))
    sids = [sid for sid, _, _ in scene.panoptic_gt.segments]
    cats = np.array([cat - 1 for _, cat, _ in scene.panoptic_gt.segments], dtype=int)
    masks4 = np.stack([id4 == sid for sid in sids]) if sids else np.zeros((0, h // 4, w // 4), bool)
    masksf = np.stack([ids == sid for sid in sids]) if sids else np.zeros((0, h, w), bool)
    return SceneTargets(cats, masks4, masksf, scene.depth_gt.depth_m, scene.depth_gt.valid)


def total_loss(scene: Scene, fwd, params: dict, cfg: ExperimentConfig,
               enabled: dict[str, bool] | None = None, frozen: dict | None = None,
               want_grads: bool = True):
    """Weighted loss of one scene plus parameter gradients.

    ``fwd`` is a ForwardBundle from ``model.forward_full``.  Returns
    (report, grads, structures); ``structures`` freezes discrete choices
    for finite-difference checking.  Raises when gating leaves no term.
    """
    from . import model  # deferred: model imports losses for targets

    lw = cfg.loss
    terms = active_terms(scene.annotation_mode, cfg) if enabled is None else enabled
    if not any(terms.values()):
        raise ValueError("no loss term is applicable (check annotation mode/toggles)")

    tg = scene_targets(scene)
    report = LossReport()
    n_layers = len(fwd.seg_preds)
    dclass = [np.zeros_like(p.class_logits) for p in fwd.seg_preds]
    dmask = [np.zeros_like(p.mask_logits) for p in fwd.seg_preds]
    structures = {"attn_masks": fwd.attn_masks, "union_masks": fwd.union_masks,
                  "matchings": [None] * n_layers, "sg_mining": None}
    empty_class = cfg.model.num_classes
    g = len(tg.cats_idx)

    if terms["cls"] or terms["mask"]:
        for j, pred in enumerate(fwd.seg_preds):
            if frozen is not None:
                assignment = frozen["matchings"][j]
            elif g > 0:
                cost = match_cost(pred, tg.cats_idx, tg.masks4, lw.w_cls, lw.w_mask)
                assignment = hungarian_match(cost).assignment
            else:
                assignment = []
            structures["matchings"][j] = assignment
            if terms["cls"]:
                targets = np.full(pred.class_logits.shape[0], empty_class, dtype=int)
                for q, gi in assignment:
                    targets[q] = tg.cats_idx[gi]
                l, dl = loss_cls(pred.class_logits, targets, empty_class, lw.empty_weight)
                report.l_cls += l
                dclass[j] += lw.w_cls * dl
            if terms["mask"]:
                ce, dice, dm = loss_mask(pred.mask_logits, tg.masks4, assignment)
                report.l_ce += ce
                report.l_dice += dice
                dmask[j] += lw.w_mask * dm
    report.l_mask = report.l_ce + report.l_dice

    dperseg = None
    dbackup = None
    if terms["depth"] and fwd.depth_pred is not None:
        dperseg = np.zeros_like(fwd.depth_pred.per_segment_depth)
        final_assign = structures["matchings"][-1] if scene.annotation_mode != "depth_only" else []
        if frozen is not None and scene.annotation_mode != "depth_only":
            final_assign = frozen["matchings"][-1]
        depth_terms = []
        if scene.annotation_mode != "depth_only" and final_assign:
            for q, gi in final_assign:
                sel = tg.masks_full[gi] & tg.valid
                if not sel.any():
                    continue
                up, up_cache = bilinear_resize_fwd(
                    fwd.depth_pred.per_segment_depth[q], sel.shape)
                l, dd = loss_depth(up[sel], tg.depth[sel], lw.si_lambda)
                depth_terms.append((l, q, sel, dd, up_cache))
        if fwd.depth_pred.backup_depth is not None and tg.valid.any():
            up, up_cache = bilinear_resize_fwd(fwd.depth_pred.backup_depth, tg.valid.shape)
            l, dd = loss_depth(up[tg.valid], tg.depth[tg.valid], lw.si_lambda)
            depth_terms.append((l, -1, tg.valid, dd, up_cache))
        if depth_terms:
            # per matched segment and backup map, weight 1 each
            report.l_depth = sum(t[0] for t in depth_terms)
            if fwd.depth_pred.backup_depth is not None:
                dbackup = np.zeros_like(fwd.depth_pred.backup_depth)
            for _, q, sel, dd, up_cache in depth_terms:
                dfull = np.zeros(sel.shape)
                dfull[sel] = dd * lw.w_depth
                dquarter = bilinear_resize_bwd(dfull, up_cache)
                if q >= 0:
                    dperseg[q] += dquarter
                else:
                    dbackup += dquarter

    dsem_extra = None
    ddep_extra = None
    if terms["sg"]:
        fm = frozen["sg_mining"] if frozen is not None else None
        l, dlevels, mining = loss_semantic_guidance(
            fwd.dep_pyr.levels, scene.panoptic_gt.id_map, lw.patch_size, lw.alpha, fm)
        report.l_sg = l
        structures["sg_mining"] = mining
        ddep_extra = [lw.w_sg * d for d in dlevels]
    if terms["dg"]:
        l, dlevels = loss_depth_guidance(fwd.sem_pyr.levels, tg.depth, tg.valid,
                                         lw.patch_size, lw.tau)
        report.l_dg = l
        dsem_extra = [lw.w_dg * d for d in dlevels]

    report.total = (lw.w_cls * report.l_cls + lw.w_mask * report.l_mask
                    + lw.w_depth * report.l_depth + lw.w_sg * report.l_sg
                    + lw.w_dg * report.l_dg)

    grads: dict[str, np.ndarray] = {}
    if want_grads:
        grads = model.backward_full(fwd, params, cfg, dclass, dmask,
                                    dperseg, dbackup, dsem_extra, ddep_extra)
    return report, grads, structures
