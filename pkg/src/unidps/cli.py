"""Command-line entry points: gen / fit / eval / gradcheck / ablate.

Every command is a pure function of (config, input files, seed); rerunning
with the same inputs reproduces outputs byte for byte, whatever --jobs is.
``UNIDPS_LOG={error|info|debug}`` controls verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import metrics, scene as scene_mod, train
from .config import ExperimentConfig, annotation_mode_for
from .gradcheck import TOLERANCE, gradcheck_report
from .model import predict
from .scene import (DepthMap, PanopticMap, Scene, SceneFormatError,
                    decode_depth, encode_depth, generate_scene, read_manifest,
                    read_png16, read_scene, scene_rng, write_png16)

log = logging.getLogger("unidps")


def _setup_logging() -> None:
    level = {"error": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(os.environ.get("UNIDPS_LOG", "error"),
                                         logging.ERROR)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s")


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# gen


def _gen_one(payload) -> str:
    cfg_dict, out_dir, index, total = payload
    cfg = ExperimentConfig.from_dict(cfg_dict)
    spec = replace(cfg.scene,
                   annotation_mode=annotation_mode_for(index, cfg.mode_split, total))
    sc = generate_scene(spec, scene_rng(cfg.seed, index))
    name = f"scene_{index:04d}"
    scene_mod.write_scene(sc, Path(out_dir) / name)
    return name


def cmd_gen(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = cfg.num_scenes
    payloads = [(asdict(cfg), str(out), i, n) for i in range(n)]
    if args.jobs > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            names = list(ex.map(_gen_one, payloads))
    else:
        names = [_gen_one(p) for p in payloads]
    manifest = {"scenes": names, "config": asdict(cfg), "seed": cfg.seed}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.info("wrote %d scenes to %s", n, out)
    return 0


# ---------------------------------------------------------------------------
# fit


def cmd_fit(args) -> int:
    cfg = _load_config(args)
    scenes = scene_mod.read_dataset(args.dataset)
    try:
        train.fit(cfg, scenes, out_dir=Path(args.out))
    except train.TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# eval


def _read_prediction(pred_dir: Path) -> tuple[PanopticMap, DepthMap]:
    ids = read_png16(pred_dir / "panoptic.png").astype(np.int32)
    try:
        meta = json.loads((pred_dir / "meta.json").read_text())
        segments = [(int(s["id"]), int(s["category_id"]), bool(s["is_thing"]))
                    for s in meta["segments"]]
    except (OSError, KeyError, json.JSONDecodeError) as e:
        raise SceneFormatError(f"{pred_dir}/meta.json: {e}") from e
    h, w = ids.shape
    depth = decode_depth(read_png16(pred_dir / "depth.png"))
    return PanopticMap(h, w, ids, segments), depth


def write_prediction(pred_dir: Path, pan: PanopticMap, depth: DepthMap) -> None:
    pred_dir.mkdir(parents=True, exist_ok=True)
    write_png16(pred_dir / "panoptic.png", pan.id_map.astype(np.uint16))
    write_png16(pred_dir / "depth.png", encode_depth(depth))
    meta = {"segments": [{"id": sid, "category_id": cat, "is_thing": thing}
                         for sid, cat, thing in pan.segments]}
    (pred_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


_worker_state: dict = {}


def _eval_forward_one(payload):
    dataset_dir, name, ckpt_path, cfg_json = payload
    key = (ckpt_path, cfg_json)
    if _worker_state.get("key") != key:
        params, _, _ = train.load_checkpoint(ckpt_path)
        _worker_state.update(key=key, params=params,
                             cfg=ExperimentConfig.from_dict(json.loads(cfg_json)))
    sc = read_scene(Path(dataset_dir) / name)
    inf = predict(sc, _worker_state["params"], _worker_state["cfg"])
    return inf.panres.panoptic, inf.depth


def cmd_eval(args) -> int:
    manifest = read_manifest(args.dataset)
    names = manifest["scenes"]
    gts = [read_scene(Path(args.dataset) / n) for n in names]

    if args.predictions:
        preds = [_read_prediction(Path(args.predictions) / n) for n in names]
    elif args.checkpoint:
        cfg_path = args.config or str(Path(args.checkpoint).parent / "config.json")
        cfg = ExperimentConfig.load(cfg_path)
        if args.seed is not None:
            cfg.seed = args.seed
        payloads = [(args.dataset, n, args.checkpoint, cfg.to_json()) for n in names]
        if args.jobs > 1 and len(names) > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as ex:
                preds = list(ex.map(_eval_forward_one, payloads))
        else:
            preds = [_eval_forward_one(p) for p in payloads]
    else:
        print("error: eval needs --checkpoint or --predictions", file=sys.stderr)
        return 2

    evals = []
    per_scene = []
    for name, sc, (pan, depth) in zip(names, gts, preds):
        ev = metrics.evaluate_scene(pan, depth, sc.panoptic_gt, sc.depth_gt)
        evals.append(ev)
        per_scene.append({"scene": name, "pq": ev.pq_stats.summary()["pq"]})
    report = metrics.aggregate(evals)
    report["per_scene"] = per_scene
    out_json = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(out_json)
        if args.checkpoint:
            for name, (pan, depth) in zip(names, preds):
                write_prediction(out_dir / "predictions" / name, pan, depth)
    print(out_json, end="")
    log.info("summary: %s", metrics.percent_table(report))
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    report = gradcheck_report(cfg, samples=args.samples)
    ok = True
    for term, err in report.items():
        passed = err < TOLERANCE
        ok &= passed
        print(f"{term:8s} worst rel err {err:.3e}  {'PASS' if passed else 'FAIL'}")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# ablate


ARCH_VARIANTS = [
    ("direct_queries", dict(enable_enhancement=False, enable_backup=False,
                            enable_sg=False, enable_dg=False)),
    ("enhanced_queries", dict(enable_enhancement=True, enable_backup=False,
                              enable_sg=False, enable_dg=False)),
    ("backup_query", dict(enable_enhancement=True, enable_backup=True,
                          enable_sg=False, enable_dg=False)),
    ("semantic_guidance", dict(enable_enhancement=True, enable_backup=True,
                               enable_sg=True, enable_dg=False)),
    ("both_guidance", dict(enable_enhancement=True, enable_backup=True,
                           enable_sg=True, enable_dg=True)),
]

GUIDANCE_VARIANTS = [
    ("no_guidance", dict(enable_sg=False, enable_dg=False)),
    ("depth_guidance", dict(enable_sg=False, enable_dg=True)),
    ("semantic_guidance", dict(enable_sg=True, enable_dg=False)),
    ("both_guidance", dict(enable_sg=True, enable_dg=True)),
]


def run_variant(cfg: ExperimentConfig, overrides: dict, scenes: list[Scene]) -> dict:
    vcfg = ExperimentConfig.from_dict({**asdict(cfg), **overrides})
    params, _ = train.fit(vcfg, scenes)
    evals = []
    for sc in scenes:
        inf = predict(sc, params, vcfg)
        evals.append(metrics.evaluate_scene(inf.panres.panoptic, inf.depth,
                                            sc.panoptic_gt, sc.depth_gt))
    report = metrics.aggregate(evals)
    return {"pq": report["pq"]["pq"], "dpq": report["dpq"]["mean"]["pq"],
            **{f"dpq_{lam}": report["dpq"][str(lam)]["pq"]
               for lam in metrics.DPQ_THRESHOLDS},
            "abs_rel": report["depth"]["abs_rel"]}


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    scenes = scene_mod.read_dataset(args.dataset)
    semi = any(sc.annotation_mode != "full" for sc in scenes)
    variants = GUIDANCE_VARIANTS if semi else ARCH_VARIANTS
    rows = []
    for name, overrides in variants:
        log.info("ablate: training variant %s", name)
        row = {"variant": name, **overrides,
               **run_variant(cfg, overrides, scenes)}
        rows.append(row)
    table = {"grid": "guidance" if semi else "architecture", "rows": rows}
    out_json = json.dumps(table, indent=2, sort_keys=True) + "\n"
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "ablation.json").write_text(out_json)
    print(out_json, end="")
    return 0


# ---------------------------------------------------------------------------


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = argparse.ArgumentParser(
        prog="unidps",
        description="Desk-scale unified depth-aware panoptic segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset=False, out=False):
        p.add_argument("--config", type=str, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--jobs", type=int, default=1)
        if dataset:
            p.add_argument("--dataset", type=str, required=True)
        if out:
            p.add_argument("--out", type=str, required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    common(p, out=True)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("fit", help="train a model on a dataset")
    common(p, dataset=True, out=True)
    p.set_defaults(fn=cmd_fit)

    p = sub.add_parser("eval", help="evaluate a checkpoint or prediction files")
    common(p, dataset=True)
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--predictions", type=str, default=None)
    p.add_argument("--out", type=str, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="verify analytic gradients")
    common(p)
    p.add_argument("--samples", type=int, default=500)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and score the toggle grid")
    common(p, dataset=True)
    p.add_argument("--out", type=str, default=None)
    p.set_defaults(fn=cmd_ablate)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (SceneFormatError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
