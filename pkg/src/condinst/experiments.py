"""Synthetic-set evaluation, the pair-discrimination experiment and the ablation sweep."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .evalbench import APReport, evaluate_ap, mask_iou
from .inference import ImagePrediction, InferenceConfig, infer_image
from .model import CondInst, ModelConfig
from .synthdata import DatasetConfig, SceneAnnotation, generate_dataset
from .training import TrainConfig, baseline_config, train

log = logging.getLogger(__name__)

SWEEP_FIELDS = ["arm", "seed", "AP", "AP50", "AP75", "pair_iou_median", "pairs_separated", "num_pairs"]


def split_datasets(cfg: DatasetConfig, num_val: int) -> tuple[list[SceneAnnotation], list[SceneAnnotation]]:
    """Training scenes ``0..n-1`` and disjoint validation scenes that follow them."""
    return generate_dataset(cfg), generate_dataset(replace(cfg, num_scenes=num_val), start=cfg.num_scenes)


def predict_all(model: CondInst, scenes, infer_cfg: InferenceConfig | None = None) -> list[ImagePrediction]:
    model.eval()
    return [infer_image(model, s.image_tensor(), infer_cfg) for s in scenes]


def ap_inputs(preds: list[ImagePrediction], scenes):
    p = [[(r.class_id, r.score, r.binary) for r in pr.instances] for pr in preds]
    g = [[(inst.class_id, inst.mask) for inst in s.instances] for s in scenes]
    return p, g


def pair_mutual_ious(preds: list[ImagePrediction], scenes) -> list[float]:
    """Mutual IoU of the predicted masks assigned to the two members of each appearance pair.

    Each ground truth takes the unused prediction with the highest mask IoU;
    when no second prediction is left the pair counts as merged (IoU 1).
    """
    out = []
    for pr, s in zip(preds, scenes):
        masks = [r.binary for r in pr.instances]
        for a, b in s.pairs:
            picks = []
            for gi in (a, b):
                gt = s.instances[gi].mask
                cand = [(mask_iou(m, gt), j) for j, m in enumerate(masks) if j not in picks]
                if not cand:
                    break
                picks.append(max(cand, key=lambda t: (t[0], -t[1]))[1])
            out.append(mask_iou(masks[picks[0]], masks[picks[1]]) if len(picks) == 2 else 1.0)
    return out


@dataclass
class ArmResult:
    arm: str
    seed: int
    ap: APReport
    pair_ious: list[float]

    def row(self) -> dict:
        ious = np.array(self.pair_ious)
        return {"arm": self.arm, "seed": self.seed, "AP": self.ap.AP, "AP50": self.ap.AP50, "AP75": self.ap.AP75,
                "pair_iou_median": float(np.median(ious)) if ious.size else float("nan"),
                "pairs_separated": float((ious < 0.5).mean()) if ious.size else float("nan"),
                "num_pairs": int(ious.size)}


def evaluate_arm(arm: str, seed: int, model: CondInst, val, infer_cfg: InferenceConfig | None = None) -> ArmResult:
    preds = predict_all(model, val, infer_cfg)
    return ArmResult(arm, seed, evaluate_ap(*ap_inputs(preds, val)), pair_mutual_ious(preds, val))


@dataclass
class Arm:
    name: str
    model_cfg: ModelConfig
    infer_cfg: InferenceConfig = field(default_factory=InferenceConfig)
    # arms that only differ at inference reuse another arm's trained weights
    reuse: str | None = None


def discrimination_arms(base: ModelConfig | None = None) -> list[Arm]:
    base = base or ModelConfig()
    return [Arm("condinst", base), Arm("vanilla_fcn", baseline_config(base))]


def ablation_arms(base: ModelConfig | None = None) -> list[Arm]:
    base = base or ModelConfig()
    return [
        Arm("rel_coords", base),
        Arm("no_coords", replace(base, coord_mode="none")),
        Arm("abs_coords", replace(base, coord_mode="abs")),
        Arm("upsample_1", replace(base, upsample_factor=1)),
        Arm("depth_1", replace(base, mask_head_depth=1)),
        Arm("depth_2", replace(base, mask_head_depth=2)),
        Arm("mask_nms", base, InferenceConfig(nms="mask"), reuse="rel_coords"),
    ]


def run_arms(arms: list[Arm], seeds=(0, 1, 2), data_cfg: DatasetConfig | None = None, num_val: int = 50,
             train_cfg: TrainConfig | None = None, out_dir: str | Path | None = None,
             cache: dict | None = None) -> list[ArmResult]:
    """Train every arm once per seed and evaluate on the held-out scenes.

    ``cache`` maps ``(model_cfg, seed)`` to trained models so identical arms
    across experiments train only once.
    """
    data_cfg = data_cfg or DatasetConfig()
    train_cfg = train_cfg or TrainConfig()
    train_set, val = split_datasets(data_cfg, num_val)
    cache = {} if cache is None else cache
    results = []
    out = Path(out_dir) if out_dir is not None else None
    for seed in seeds:
        for arm in arms:
            key = (repr(arm.model_cfg), seed)
            if key not in cache:
                log.info("training arm %s seed %d", arm.name, seed)
                run_dir = out / f"{arm.name}_seed{seed}" if out is not None else None
                cache[key] = train(arm.model_cfg, train_set, replace(train_cfg, seed=seed), run_dir).model
            res = evaluate_arm(arm.name, seed, cache[key], val, arm.infer_cfg)
            log.info("%s", res.row())
            results.append(res)
    if out is not None:
        write_sweep_csv(results, out / "sweep.csv")
    return results


def write_sweep_csv(results: list[ArmResult], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        for r in results:
            w.writerow(r.row())
    return path


def median_by_arm(results: list[ArmResult], key: str) -> dict[str, float]:
    arms: dict[str, list[float]] = {}
    for r in results:
        arms.setdefault(r.arm, []).append(r.row()[key])
    return {a: float(np.median(v)) for a, v in arms.items()}
