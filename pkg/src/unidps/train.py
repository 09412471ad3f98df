"""Training loop: full-batch SGD with momentum and cosine decay.

Gradients accumulate over scenes in index order, so a run is a pure
function of (config, dataset, seed).  The schedule has two phases: the
first ``seg_pretrain_frac`` of the budget trains with segmentation losses
only, the remainder with every active loss.  Checkpoints carry parameters,
momentum buffers and the step counter, which makes a restart reproduce the
remaining trajectory exactly.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from .blocks import Params
from .config import ExperimentConfig
from .losses import active_terms, total_loss
from .model import forward_full, init_params
from .scene import Scene

log = logging.getLogger("unidps")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, checkpoint: Path | None):
        super().__init__(f"total loss became non-finite at step {step}"
                         + (f"; last good checkpoint: {checkpoint}" if checkpoint else ""))
        self.step = step
        self.checkpoint = checkpoint


def cosine_lr(base_lr: float, step: int, total: int) -> float:
    if total <= 1:
        return base_lr
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * step / total))


def save_checkpoint(path: Path, params: Params, velocity: Params, step: int) -> None:
    payload = {f"p.{k}": v for k, v in params.items()}
    payload.update({f"v.{k}": v for k, v in velocity.items()})
    payload["step"] = np.array(step, dtype=np.int64)
    np.savez(path, **payload)


def load_checkpoint(path: Path):
    with np.load(path) as z:
        params = {k[2:]: z[k].copy() for k in z.files if k.startswith("p.")}
        velocity = {k[2:]: z[k].copy() for k in z.files if k.startswith("v.")}
        step = int(z["step"])
    return params, velocity, step


def scene_gradients(scene: Scene, params: Params, cfg: ExperimentConfig,
                    seg_only: bool):
    """Loss report and parameter gradients for one scene, or None if the
    scene's annotations feed no active term."""
    terms = active_terms(scene.annotation_mode, cfg, seg_only=seg_only)
    if not any(terms.values()):
        return None
    fwd = forward_full(scene.image, params, cfg, need_depth=terms["depth"])
    report, grads, _ = total_loss(scene, fwd, params, cfg, enabled=terms)
    return report, grads


def fit(cfg: ExperimentConfig, scenes: list[Scene], out_dir: Path | None = None,
        resume_from: Path | None = None):
    """Returns (params, history).  ``history`` is one dict per step."""
    tc = cfg.train
    if resume_from is not None:
        params, velocity, start_step = load_checkpoint(resume_from)
    else:
        params, velocity, start_step = init_params(cfg), {}, 0
    history: list[dict] = []
    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg.save(out_dir / "config.json")
        log_path = out_dir / "loss_log.jsonl"
        if resume_from is None and log_path.exists():
            log_path.unlink()

    seg_steps = int(round(tc.steps * tc.seg_pretrain_frac))
    last_good: Params = {k: v.copy() for k, v in params.items()}

    for step in range(start_step, tc.steps):
        seg_only = step < seg_steps
        total_grads: Params = {}
        sums: dict[str, float] = {}
        n_used = 0
        for scene in scenes:
            result = scene_gradients(scene, params, cfg, seg_only)
            if result is None:
                continue
            report, grads = result
            n_used += 1
            for k, v in report.to_dict().items():
                sums[k] = sums.get(k, 0.0) + v
            for k in sorted(grads):
                if k in total_grads:
                    total_grads[k] += grads[k]
                else:
                    total_grads[k] = grads[k]
        if n_used == 0:
            raise ValueError("no scene contributes any active loss term")

        mean_total = sums["total"] / n_used
        if not np.isfinite(mean_total) or any(
                not np.isfinite(g).all() for g in total_grads.values()):
            ckpt = None
            if out_dir is not None:
                ckpt = out_dir / "checkpoint_last_good.npz"
                save_checkpoint(ckpt, last_good, velocity, step)
            raise TrainingDiverged(step, ckpt)
        last_good = {k: v.copy() for k, v in params.items()}

        lr = cosine_lr(tc.lr, step, tc.steps)
        for k in sorted(total_grads):
            g = total_grads[k] / n_used
            if k not in velocity:
                velocity[k] = np.zeros_like(g)
            velocity[k] = tc.momentum * velocity[k] + g
            params[k] = params[k] - lr * velocity[k]

        entry = {"step": step, "lr": lr, "phase": "seg" if seg_only else "full"}
        entry.update({k: v / n_used for k, v in sums.items()})
        history.append(entry)
        if log_path is not None:
            with open(log_path, "a") as f:
                f.write(json.dumps(entry, sort_keys=True) + "\n")
        if out_dir is not None and tc.checkpoint_every > 0 \
                and (step + 1) % tc.checkpoint_every == 0:
            save_checkpoint(out_dir / "checkpoint.npz", params, velocity, step + 1)
        if step % 100 == 0:
            log.info("step %d (%s): total %.4f", step, entry["phase"], entry["total"])

    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint.npz", params, velocity, tc.steps)
    return params, history
