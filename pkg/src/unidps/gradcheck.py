"""Central finite-difference verification of every analytic gradient.

Per-term checks probe each loss in isolation on random inputs; the
end-to-end check perturbs sampled parameters of a full model on a small
scene and compares against the backward pass through all modules.

Discrete choices (attention masks, assignments, mined pixels) are captured
once and replayed for every perturbed evaluation, so the difference
quotient and the analytic gradient refer to the same smooth branch.
Sampled coordinates are restricted to gradients large enough for a central
difference to resolve (|g| >= GRAD_FLOOR); below that the quotient is
dominated by roundoff, not by the chain rule under test.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .config import ExperimentConfig
from .losses import (depth_guidance_level, loss_cls, loss_depth, loss_mask,
                     semantic_guidance_level, total_loss)
from .model import forward_full
from .numerics import make_rng
from .scene import SceneSpec, generate_scene

GRAD_FLOOR = 1e-5
TOLERANCE = 1e-4


def fd_step(theta: float) -> float:
    return 1e-5 * (1.0 + abs(theta))


def rel_err(analytic: float, numeric: float) -> float:
    denom = max(abs(analytic), abs(numeric))
    if denom < GRAD_FLOOR:
        return 0.0
    return abs(analytic - numeric) / denom


def _is_kinked(up: float, down: float, center: float, h: float) -> bool:
    """One-sided slopes disagreeing means the interval straddles a kink
    (ReLU / hinge boundary).  Both slopes are numeric, so this test cannot
    excuse a wrong analytic gradient; it only identifies degenerate sample
    points, where the centered quotient averages two branches."""
    right = (up - center) / h
    left = (center - down) / h
    return abs(right - left) > 0.3 * max(abs(right), abs(left), GRAD_FLOOR)


def _check_array(value_fn, x: np.ndarray, grad: np.ndarray, samples: int,
                 rng: np.random.Generator) -> float:
    """Worst relative error over sampled coordinates of ``x``."""
    flat_g = grad.reshape(-1)
    pool = np.flatnonzero(np.abs(flat_g) >= GRAD_FLOOR)
    if pool.size == 0:
        return 0.0
    picks = rng.permutation(pool)
    center = value_fn()
    worst = 0.0
    checked = 0
    xf = x.reshape(-1)
    for i in picks:
        if checked >= samples:
            break
        h = fd_step(xf[i])
        orig = xf[i]
        xf[i] = orig + h
        up = value_fn()
        xf[i] = orig - h
        down = value_fn()
        xf[i] = orig
        err = rel_err(flat_g[i], (up - down) / (2.0 * h))
        if err > TOLERANCE and _is_kinked(up, down, center, h):
            continue
        checked += 1
        worst = max(worst, err)
    return worst


def check_loss_cls(rng: np.random.Generator, samples: int = 100) -> float:
    logits = rng.normal(0.0, 1.0, size=(12, 7))
    targets = rng.integers(0, 7, size=12)
    _, grad = loss_cls(logits, targets, empty_class=6, empty_weight=0.1)
    fn = lambda: loss_cls(logits, targets, 6, 0.1)[0]
    return _check_array(fn, logits, grad, samples, rng)


def check_loss_mask(rng: np.random.Generator, samples: int = 100) -> float:
    logits = rng.normal(0.0, 1.0, size=(4, 8, 16))
    gt = rng.random((3, 8, 16)) > 0.5
    assignment = [(0, 1), (2, 0), (3, 2)]
    ce, dice, grad = loss_mask(logits, gt, assignment)
    fn = lambda: sum(loss_mask(logits, gt, assignment)[:2])
    return _check_array(fn, logits, grad, samples, rng)


def check_loss_depth(rng: np.random.Generator, samples: int = 100) -> float:
    d = rng.uniform(1.0, 79.0, size=200)
    d_hat = rng.uniform(1.0, 79.0, size=200)
    _, grad = loss_depth(d, d_hat, 0.85)
    fn = lambda: loss_depth(d, d_hat, 0.85)[0]
    return _check_array(fn, d, grad, samples, rng)


def check_loss_sg(rng: np.random.Generator, samples: int = 100) -> float:
    level = rng.normal(0.0, 1.0, size=(16, 8, 12))
    ids = rng.integers(1, 4, size=(8, 12)).astype(np.int32)
    loss0, grad, mining, n = semantic_guidance_level(level, ids, 3, 0.3)
    assert n > 0
    fn = lambda: semantic_guidance_level(level, ids, 3, 0.3, frozen_mining=mining)[0]
    return _check_array(fn, level, grad, samples, rng)


def check_loss_dg(rng: np.random.Generator, samples: int = 100) -> float:
    level = rng.normal(0.0, 1.0, size=(16, 8, 12))
    depth = rng.uniform(1.0, 80.0, size=(8, 12))
    valid = rng.random((8, 12)) > 0.2
    _, grad, n = depth_guidance_level(level, depth, valid, 3, 10.0)
    assert n > 0
    fn = lambda: depth_guidance_level(level, depth, valid, 3, 10.0)[0]
    return _check_array(fn, level, grad, samples, rng)


def gradcheck_scene_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Small-scene configuration for the end-to-end check (patch size 3:
    a 32x64 image has no 5x5 windows left at the pyramid resolutions)."""
    cfg = replace(cfg)
    cfg.scene = replace(cfg.scene, height=32, width=64, things=2, stuff=2,
                        sparsity=0.9)
    cfg.loss = replace(cfg.loss, patch_size=3)
    return cfg


def check_end_to_end(cfg: ExperimentConfig, rng: np.random.Generator,
                     samples: int = 500, corrupt: bool = False) -> float:
    """Worst relative error over sampled parameters of the total loss."""
    from .model import init_params

    cfg = gradcheck_scene_config(cfg)
    scene = generate_scene(cfg.scene, make_rng(cfg.seed + 17))
    params = init_params(cfg)
    fwd = forward_full(scene.image, params, cfg, need_depth=True)
    _, grads, structures = total_loss(scene, fwd, params, cfg)
    if corrupt:
        grads = {k: v + 1e-2 for k, v in grads.items()}

    keys = sorted(grads)
    entries = []
    for k in keys:
        idxs = np.flatnonzero(np.abs(grads[k].reshape(-1)) >= GRAD_FLOOR)
        entries.extend((k, int(i)) for i in idxs)
    if not entries:
        return 0.0
    picks = rng.permutation(len(entries))

    def value() -> float:
        f = forward_full(scene.image, params, cfg, need_depth=True, frozen=structures)
        report, _, _ = total_loss(scene, f, params, cfg, frozen=structures,
                                  want_grads=False)
        return report.total

    center = value()
    worst = 0.0
    checked = 0
    for pi in picks:
        if checked >= samples:
            break
        k, i = entries[pi]
        flat = params[k].reshape(-1)
        orig = flat[i]
        h = fd_step(orig)
        flat[i] = orig + h
        up = value()
        flat[i] = orig - h
        down = value()
        flat[i] = orig
        numeric = (up - down) / (2.0 * h)
        err = rel_err(grads[k].reshape(-1)[i], numeric)
        if err > TOLERANCE and _is_kinked(up, down, center, h):
            continue
        checked += 1
        worst = max(worst, err)
    return worst


def gradcheck_report(cfg: ExperimentConfig, samples: int = 500,
                     corrupt_total: bool = False) -> dict[str, float]:
    """Worst relative error per loss term plus the end-to-end total."""
    rng = make_rng(cfg.seed + 1000)
    per_term_samples = max(50, samples // 5)
    return {
        "l_cls": check_loss_cls(rng, per_term_samples),
        "l_mask": check_loss_mask(rng, per_term_samples),
        "l_depth": check_loss_depth(rng, per_term_samples),
        "l_sg": check_loss_sg(rng, per_term_samples),
        "l_dg": check_loss_dg(rng, per_term_samples),
        "total": check_end_to_end(cfg, rng, samples, corrupt=corrupt_total),
    }
