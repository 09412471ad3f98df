"""Panoptic Quality, depth-aware PQ, and depth error statistics.

Matching rule: a prediction and a GT segment match iff same category and
IoU > 0.5 (which makes matches unique; asserted).  GT-void pixels are
excluded from IoU unions, and prediction segments majority-covered by GT
void are not false positives.  Per-class PQ is averaged over classes that
occur in the ground truth; DPQ voids prediction pixels whose relative
depth error exceeds the threshold before scoring, leaving pixels without
valid GT depth untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scene import DepthMap, PanopticMap, is_thing

DPQ_THRESHOLDS = (0.1, 0.25, 0.5)
IOU_THRESHOLD = 0.5


class MetricError(ValueError):
    pass


@dataclass
class ClassStats:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0

    def merge(self, other: "ClassStats") -> None:
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.iou_sum += other.iou_sum

    def pq(self) -> float:
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.iou_sum / denom if denom > 0 else 0.0


@dataclass
class PQStats:
    per_class: dict[int, ClassStats] = field(default_factory=dict)
    present: set[int] = field(default_factory=set)

    def stats(self, cat: int) -> ClassStats:
        return self.per_class.setdefault(cat, ClassStats())

    def merge(self, other: "PQStats") -> None:
        for cat, cs in sorted(other.per_class.items()):
            self.stats(cat).merge(cs)
        self.present |= other.present

    def summary(self) -> dict[str, float]:
        cats = sorted(self.present)
        vals = [self.per_class.get(c, ClassStats()).pq() for c in cats]
        things = [v for c, v in zip(cats, vals) if is_thing(c)]
        stuffs = [v for c, v in zip(cats, vals) if not is_thing(c)]
        mean = lambda xs: float(sum(xs) / len(xs)) if xs else 0.0
        return {"pq": mean(vals), "pq_thing": mean(things), "pq_stuff": mean(stuffs)}


def _check_ids_listed(pan: PanopticMap, who: str) -> None:
    listed = {sid for sid, _, _ in pan.segments}
    present = set(np.unique(pan.id_map).tolist()) - {0}
    if not present <= listed:
        raise MetricError(
            f"{who}: ids {sorted(present - listed)} present in map but absent from segments")


def panoptic_quality(pred: PanopticMap, gt: PanopticMap) -> PQStats:
    """Per-class TP/FP/FN counts and IoU sums for one scene."""
    if pred.id_map.shape != gt.id_map.shape:
        raise MetricError(f"shape mismatch: pred {pred.id_map.shape} vs gt {gt.id_map.shape}")
    _check_ids_listed(pred, "prediction")
    _check_ids_listed(gt, "ground truth")
    gt_cat = gt.categories()
    pred_cat = pred.categories()

    combo = gt.id_map.astype(np.int64) * (1 << 32) + pred.id_map.astype(np.int64)
    pairs, counts = np.unique(combo, return_counts=True)
    inter = {(int(p >> 32), int(p & 0xFFFFFFFF)): int(c) for p, c in zip(pairs, counts)}

    gt_area: dict[int, int] = {}
    pred_area: dict[int, int] = {}
    void_overlap: dict[int, int] = {}
    for (gid, pid), c in inter.items():
        if gid != 0:
            gt_area[gid] = gt_area.get(gid, 0) + c
        if pid != 0:
            pred_area[pid] = pred_area.get(pid, 0) + c
            if gid == 0:
                void_overlap[pid] = c

    stats = PQStats(present={cat for _, cat, _ in gt.segments})
    matched_gt: set[int] = set()
    matched_pred: set[int] = set()
    for gid, pid in sorted(k for k in inter if k[0] != 0 and k[1] != 0):
        if pid not in pred_cat or gt_cat[gid] != pred_cat[pid]:
            continue
        i = inter[(gid, pid)]
        union = gt_area[gid] + pred_area[pid] - i - void_overlap.get(pid, 0)
        iou = i / union
        if iou > IOU_THRESHOLD:
            assert gid not in matched_gt and pid not in matched_pred, \
                "IoU > 0.5 matches must be unique"
            matched_gt.add(gid)
            matched_pred.add(pid)
            cs = stats.stats(gt_cat[gid])
            cs.tp += 1
            cs.iou_sum += iou

    for gid in sorted(gt_area):
        if gid not in matched_gt:
            stats.stats(gt_cat[gid]).fn += 1
    for pid in sorted(pred_area):
        if pid in matched_pred:
            continue
        if void_overlap.get(pid, 0) > 0.5 * pred_area[pid]:
            continue  # mostly covers GT void: not a false positive
        if pid in pred_cat:
            stats.stats(pred_cat[pid]).fp += 1
    return stats


def dpq(pred_pan: PanopticMap, pred_depth: DepthMap, gt_pan: PanopticMap,
        gt_depth: DepthMap, threshold: float) -> PQStats:
    """PQ after voiding prediction pixels with relative depth error > threshold.

    Pixels without valid GT depth pass through unvoided (no error is
    measurable there).
    """
    if pred_depth.depth_m.shape != gt_depth.depth_m.shape:
        raise MetricError("depth map shape mismatch")
    bad = gt_depth.valid & (np.abs(pred_depth.depth_m - gt_depth.depth_m)
                            > threshold * gt_depth.depth_m)
    voided = pred_pan.id_map.copy()
    voided[bad] = 0
    pan = PanopticMap(pred_pan.height, pred_pan.width, voided, pred_pan.segments)
    return panoptic_quality(pan, gt_pan)


def depth_metrics(pred: DepthMap, gt: DepthMap) -> dict[str, float]:
    sums = depth_error_sums(pred, gt)
    return finalize_depth_metrics(sums)


def depth_error_sums(pred: DepthMap, gt: DepthMap) -> dict[str, float]:
    sel = gt.valid
    n = int(np.count_nonzero(sel))
    if n == 0:
        raise MetricError("no valid GT depth pixels")
    d = pred.depth_m[sel]
    dh = gt.depth_m[sel]
    ratio = np.maximum(d / dh, dh / d)
    return {
        "n": n,
        "abs_rel_sum": float(np.sum(np.abs(d - dh) / dh)),
        "sq_log_sum": float(np.sum((np.log(d) - np.log(dh)) ** 2)),
        "d1": int(np.count_nonzero(ratio < 1.25)),
        "d2": int(np.count_nonzero(ratio < 1.25 ** 2)),
        "d3": int(np.count_nonzero(ratio < 1.25 ** 3)),
    }


def finalize_depth_metrics(s: dict[str, float]) -> dict[str, float]:
    n = s["n"]
    return {
        "abs_rel": s["abs_rel_sum"] / n,
        "rmse_log": float(np.sqrt(s["sq_log_sum"] / n)),
        "delta1": s["d1"] / n,
        "delta2": s["d2"] / n,
        "delta3": s["d3"] / n,
    }


# ---------------------------------------------------------------------------
# dataset-level aggregation


@dataclass
class SceneEval:
    pq_stats: PQStats
    dpq_stats: dict[float, PQStats]
    depth_sums: dict[str, float]


def evaluate_scene(pred_pan: PanopticMap, pred_depth: DepthMap, gt_pan: PanopticMap,
                   gt_depth: DepthMap) -> SceneEval:
    return SceneEval(
        pq_stats=panoptic_quality(pred_pan, gt_pan),
        dpq_stats={lam: dpq(pred_pan, pred_depth, gt_pan, gt_depth, lam)
                   for lam in DPQ_THRESHOLDS},
        depth_sums=depth_error_sums(pred_depth, gt_depth),
    )


def aggregate(evals: list[SceneEval]) -> dict:
    """Pool per-class counts across scenes, then form the ratios."""
    if not evals:
        raise MetricError("empty scene list")
    pq_total = PQStats()
    dpq_total = {lam: PQStats() for lam in DPQ_THRESHOLDS}
    depth_total = {k: 0 for k in evals[0].depth_sums}
    for ev in evals:
        pq_total.merge(ev.pq_stats)
        for lam in DPQ_THRESHOLDS:
            dpq_total[lam].merge(ev.dpq_stats[lam])
        for k, v in ev.depth_sums.items():
            depth_total[k] += v

    report = {"pq": pq_total.summary()}
    dpq_section = {}
    for lam in DPQ_THRESHOLDS:
        dpq_section[str(lam)] = dpq_total[lam].summary()
    dpq_section["mean"] = {
        key: float(np.mean([dpq_total[lam].summary()[key] for lam in DPQ_THRESHOLDS]))
        for key in ("pq", "pq_thing", "pq_stuff")
    }
    report["dpq"] = dpq_section
    report["depth"] = finalize_depth_metrics(depth_total)
    report["counts"] = {
        str(cat): {"tp": cs.tp, "fp": cs.fp, "fn": cs.fn, "iou_sum": cs.iou_sum}
        for cat, cs in sorted(pq_total.per_class.items())
    }
    return report


def percent_table(report: dict) -> dict:
    """Quality ratios as percentages with one decimal, like the usual tables."""
    out = {"pq": round(100 * report["pq"]["pq"], 1),
           "pq_thing": round(100 * report["pq"]["pq_thing"], 1),
           "pq_stuff": round(100 * report["pq"]["pq_stuff"], 1)}
    for lam in DPQ_THRESHOLDS:
        out[f"dpq_{lam}"] = round(100 * report["dpq"][str(lam)]["pq"], 1)
    out["dpq"] = round(100 * report["dpq"]["mean"]["pq"], 1)
    out["abs_rel"] = round(report["depth"]["abs_rel"], 4)
    return out
