"""Command-line driver: gen-data, train, infer, eval, bench, render, sweep.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as C
from .evalbench import PQAccumulator, bench_mask_head, evaluate_ap
from .experiments import Arm, ap_inputs, run_arms, write_sweep_csv
from .inference import (InferenceConfig, infer_image, panoptic_from_scene, read_prediction,
                        write_prediction)
from .losses import NonFiniteLossError
from .model import CheckpointError, CondInst, ModelConfig, load_checkpoint
from .plotting import plot_sweep, plot_timings, render_instances, render_panoptic
from .synthdata import DatasetConfig, DatasetError, generate_dataset, read_dataset, read_scene, write_dataset
from .training import TrainConfig, make_model_config, train

log = logging.getLogger("condinst")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# sweep axis name -> config key
SWEEP_AXES = {
    "depth": "model.mask_head_depth",
    "width": "model.mask_head_width",
    "c_bottom": "model.c_bottom",
    "upsample": "model.upsample_factor",
    "coords": "model.coord_mode",
    "head": "model.mask_head_mode",
    "nms": "infer.nms",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n\n{self.format_help()}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="condinst", description="Dynamic mask-head instance segmentation on synthetic scenes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    docs = {
        "gen-data": "generate a synthetic dataset directory",
        "train": "train a model and write checkpoints and loss_log.csv",
        "infer": "run a checkpoint over a dataset and write predictions",
        "eval": "evaluate a checkpoint and write metrics.json",
        "bench": "time the dynamic mask heads and write timings.csv",
        "render": "draw ground truth or predictions to PNG",
        "sweep": "train and evaluate a grid of configurations into sweep.csv",
    }
    p.subcommands = {}
    for name, doc in docs.items():
        sp = sub.add_parser(name, help=doc, description=doc)
        C.add_options(sp, name)
        p.subcommands[name] = sp
    return p


# ---------------------------------------------------------------------------
# config plumbing


def data_config(cfg) -> DatasetConfig:
    return DatasetConfig(seed=cfg["run.seed"], **C.section(cfg, "data"))


def model_config(cfg, num_classes: int) -> ModelConfig:
    return ModelConfig(num_classes=num_classes, **C.section(cfg, "model"))


def train_config(cfg) -> TrainConfig:
    t = C.section(cfg, "train")
    t.pop("data")
    return TrainConfig(seed=cfg["run.seed"], **t)


def infer_config(cfg) -> InferenceConfig:
    return InferenceConfig(nms=cfg["infer.nms"], score_threshold=cfg["infer.score_threshold"],
                           max_detections=cfg["infer.max_detections"])


def out_dir(cfg) -> Path:
    if not cfg["run.out"]:
        raise UsageError("--out is required")
    out = Path(cfg["run.out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def check_inputs(cfg) -> None:
    """Fail on missing input paths before anything is written."""
    for key in ("infer.checkpoint", "bench.checkpoint"):
        if cfg.get(key) and not Path(cfg[key]).exists():
            raise CheckpointError(f"checkpoint path not found: {cfg[key]}")
    for key in ("infer.data", "train.data", "render.data", "render.prediction"):
        if cfg.get(key) and not Path(cfg[key]).exists():
            raise FileNotFoundError(f"{key.split('.')[1]} path not found: {cfg[key]}")


def write_run_config(out: Path, command: str, cfg) -> None:
    doc = {"command": command, "config": {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()},
           "argv": sys.argv[1:]}
    (out / "run_config.json").write_text(json.dumps(doc, indent=1))


def _require(path, what: str) -> Path:
    if not path:
        raise UsageError(f"{what} is required")
    return Path(path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg, out: Path) -> None:
    dcfg = data_config(cfg)
    scenes = generate_dataset(dcfg)
    write_dataset(scenes, out, dcfg)
    log.info("wrote %d scenes to %s", len(scenes), out)


def _training_data(cfg):
    if cfg["train.data"]:
        scenes = read_dataset(cfg["train.data"])
        n_things = scenes[0].num_thing_classes if scenes else cfg["data.num_thing_classes"]
        return scenes, n_things
    return generate_dataset(data_config(cfg)), cfg["data.num_thing_classes"]


def cmd_train(cfg, out: Path) -> None:
    tcfg = train_config(cfg)
    scenes, n_things = _training_data(cfg)
    mcfg = make_model_config(model_config(cfg, n_things), tcfg, cfg["data.num_stuff_classes"])
    res = train(mcfg, scenes, tcfg, out, progress=True)
    log.info("checkpoint at %s", res.checkpoint)


def _load_model(path) -> CondInst:
    model = load_checkpoint(_require(path, "--checkpoint"))
    model.eval()
    return model


def _predict(cfg):
    model = _load_model(cfg["infer.checkpoint"])
    scenes = read_dataset(_require(cfg["infer.data"], "--data"))
    if cfg["infer.limit"] > 0:
        scenes = scenes[:cfg["infer.limit"]]
    icfg = infer_config(cfg)
    n_things = scenes[0].num_thing_classes if scenes else model.cfg.num_classes
    preds = [infer_image(model, s.image_tensor(), icfg, n_things) for s in scenes]
    return model, scenes, preds


def cmd_infer(cfg, out: Path) -> None:
    _, scenes, preds = _predict(cfg)
    for s, p in zip(scenes, preds):
        write_prediction(p, out / "predictions", f"scene_{s.scene_id:05d}")
    log.info("wrote %d predictions to %s", len(preds), out / "predictions")


def cmd_eval(cfg, out: Path) -> None:
    model, scenes, preds = _predict(cfg)
    metrics = {"num_images": len(scenes), "nms": cfg["infer.nms"]}
    metrics["instance"] = evaluate_ap(*ap_inputs(preds, scenes)).as_dict()
    if all(p.panoptic is not None for p in preds) and preds:
        acc = PQAccumulator()
        for s, p in zip(scenes, preds):
            acc.update(p.panoptic, panoptic_from_scene(s))
        metrics["panoptic"] = acc.report().as_dict()
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1))
    print(json.dumps({"AP": metrics["instance"]["AP"], "AP50": metrics["instance"]["AP50"],
                      **({"PQ": metrics["panoptic"]["PQ"]} if "panoptic" in metrics else {})}))


def cmd_bench(cfg, out: Path) -> None:
    if cfg["bench.checkpoint"]:
        model = _load_model(cfg["bench.checkpoint"])
    else:
        model = CondInst(model_config(cfg, 3), seed=cfg["run.seed"])
    dtype = torch.float32 if cfg["bench.dtype"] == "float32" else torch.float64
    rep = bench_mask_head(model, k_values=cfg["bench.k_values"], repeats=cfg["bench.repeats"],
                          seed=cfg["run.seed"], dtype=dtype)
    with open(out / "timings.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["K", "median_ms", "p10", "p90", "repeats"])
        for r in rep.rows:
            w.writerow([r.k, f"{r.median_ms:.6f}", f"{r.p10_ms:.6f}", f"{r.p90_ms:.6f}", r.repeats])
    summary = {"detector_ms": rep.detector_ms, "total_inference_ms": rep.total_inference_ms,
               "mask_share": rep.mask_share}
    (out / "timings_summary.json").write_text(json.dumps(summary, indent=1))
    if cfg["bench.plot"]:
        plot_timings(rep, out / "timings.png")
    print("---- timings ----")
    for r in rep.rows:
        print(f"K={r.k:4d} median {r.median_ms:.4f} ms (p10 {r.p10_ms:.4f}, p90 {r.p90_ms:.4f})")
    print(f"mask-head share at K={max(cfg['bench.k_values'])}: {rep.mask_share:.1%}")
    print("-----------------")


def cmd_render(cfg, out: Path) -> None:
    data = _require(cfg["render.data"], "--data")
    scene = read_scene(data, cfg["render.scene"])
    name = f"scene_{scene.scene_id:05d}"
    if cfg["render.prediction"]:
        doc = read_prediction(cfg["render.prediction"])
        if cfg["render.panoptic"]:
            if "panoptic_png" not in doc:
                raise DatasetError("prediction holds no panoptic map", scene.scene_id, cfg["render.prediction"])
            from PIL import Image
            root = Path(cfg["render.prediction"]).parent
            ids = np.asarray(Image.open(root / doc["panoptic_png"])).astype(np.int32)
            segs = json.loads((root / doc["segments_json"]).read_text())
            path = render_panoptic(scene.image, ids, {int(k): v["category"] for k, v in segs.items()},
                                   out / f"{name}_pred_panoptic.png")
        else:
            dets = doc["detections"]
            path = render_instances(scene.image, [d["mask"] for d in dets], out / f"{name}_pred.png",
                                    labels=[d["class_id"] for d in dets], scores=[d["score"] for d in dets],
                                    title="prediction")
    elif cfg["render.panoptic"]:
        segs = {int(k): v[0] for k, v in scene.segments.items()}
        path = render_panoptic(scene.image, scene.panoptic.astype(np.int32), segs, out / f"{name}_gt_panoptic.png")
    else:
        path = render_instances(scene.image, [i.visible for i in scene.instances], out / f"{name}_gt.png",
                                labels=[i.class_id for i in scene.instances], title="ground truth")
    log.info("wrote %s", path)


def parse_axes(specs) -> list[tuple[str, list]]:
    axes = []
    for spec in specs:
        if "=" not in spec:
            raise UsageError(f"sweep axis must look like name=v1,v2; got {spec!r}")
        name, values = spec.split("=", 1)
        name = name.strip()
        key = SWEEP_AXES.get(name, name if "." in name else None)
        if key is None:
            raise UsageError(f"unknown sweep axis {name!r}; known: {', '.join(SWEEP_AXES)}")
        opt = next((o for o in C.SCHEMAS["sweep"] + C.INFER if o.key == key), None)
        if opt is None:
            raise UsageError(f"sweep axis {name!r} does not map to a configurable key")
        axes.append((key, [opt.parse(v.strip()) for v in values.split(",") if v.strip()]))
    return axes


def cmd_sweep(cfg, out: Path) -> None:
    axes = parse_axes(cfg["sweep.axis"])
    if not axes:
        raise UsageError("sweep needs at least one --axis name=v1,v2")
    base = dict(cfg)
    arms = []
    for combo in itertools.product(*[vals for _, vals in axes]):
        c = dict(base)
        nms = "box"
        for (key, _), v in zip(axes, combo):
            if key == "infer.nms":
                nms = v
            else:
                c[key] = v
        label = ",".join(f"{k.split('.')[-1]}={v}" for (k, _), v in zip(axes, combo))
        arms.append(Arm(label, model_config(c, cfg["data.num_thing_classes"]), InferenceConfig(nms=nms)))
    tcfg = train_config(cfg)
    if cfg["train.data"]:
        raise UsageError("sweep generates its own train/validation split from data.*; unset train.data")
    results = run_arms(arms, cfg["sweep.seeds"], data_config(cfg), cfg["sweep.num_val"], tcfg, out / "runs")
    write_sweep_csv(results, out / "sweep.csv")
    rows = [r.row() for r in results]
    plot_sweep(rows, out / "sweep.png")
    print("---- sweep ----")
    for r in rows:
        print(f"{r['arm']:<30} seed {r['seed']}  AP {r['AP']:.4f}  AP50 {r['AP50']:.4f}")
    print("---------------")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "bench": cmd_bench, "render": cmd_render, "sweep": cmd_sweep}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("CONDINST_THREADS")
    try:
        if threads:
            if not threads.isdigit() or int(threads) < 1:
                raise UsageError(f"CONDINST_THREADS must be a positive integer, got {threads!r}")
            torch.set_num_threads(int(threads))
        parser = build_parser()
        ns, extra = parser.parse_known_args(argv)
        if ns.command is None:
            raise UsageError(parser.format_help())
        if extra:
            sp = parser.subcommands[ns.command]
            raise UsageError(f"{sp.prog}: unrecognized arguments: {' '.join(extra)}\n\n{sp.format_help()}")
        cfg = C.resolve(ns.command, ns)
        check_inputs(cfg)
        out = out_dir(cfg)
        write_run_config(out, ns.command, cfg)
        COMMANDS[ns.command](cfg, out)
        return EXIT_OK
    except (UsageError, C.ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLossError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
