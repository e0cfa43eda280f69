"""SGD training loop, batched loss computation and the vanilla-FCN control arm."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .losses import (
    LossBreakdown,
    NonFiniteLossError,
    centerness_loss,
    dice_loss,
    focal_loss,
    giou_loss,
    semantic_ce_loss,
    total_loss,
)
from .model import CondInst, ModelConfig, save_checkpoint
from .numerics import DTYPE
from .synthdata import SceneAnnotation, _assemble, read_dataset
from .targets import TargetSet, assign_targets, downsample_gt_mask, sample_positives

log = logging.getLogger(__name__)

LOG_FIELDS = ["iteration", "lr", "l_cls", "l_box", "l_ctr", "l_mask", "l_pano", "l_aux_sem", "total", "num_pos"]


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: tuple[int, ...] = (1500,)
    lr_drop: float = 0.1
    warmup_iters: int = 100
    seed: int = 0
    task: str = "instance"  # or "panoptic"
    flip: bool = False
    aux_semantic: bool = False
    sample_cap: int = 64
    checkpoint_at_milestones: bool = True

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.iterations < 0 or self.batch_size < 1 or self.lr <= 0 or self.sample_cap < 1:
            raise ValueError("iterations >= 0, batch_size >= 1, lr > 0 and sample_cap >= 1 required")
        if any(m <= 0 or (self.iterations and m >= self.iterations) for m in self.milestones):
            raise ValueError("milestones must lie strictly inside (0, iterations)")
        if self.task not in ("instance", "panoptic"):
            raise ValueError(f"task must be 'instance' or 'panoptic', got {self.task!r}")

    def lr_at(self, it: int) -> float:
        lr = self.lr * self.lr_drop ** sum(it >= m for m in self.milestones)
        if self.warmup_iters and it < self.warmup_iters:
            lr *= (it + 1) / self.warmup_iters
        return lr


# ---------------------------------------------------------------------------
# batches


def flip_scene(scene: SceneAnnotation) -> SceneAnnotation:
    """Left-right flip; boxes, visible masks and panoptic ids are rebuilt from flipped masks."""
    out = _assemble(scene.scene_id, scene.image[:, ::-1].copy(),
                    [inst.shape for inst in scene.instances],
                    [inst.mask[:, ::-1].copy() for inst in scene.instances],
                    scene.stuff_map[:, ::-1].copy(), scene.stuff_layout, scene.pairs,
                    scene.num_thing_classes, list(scene.flags))
    return out


@dataclass
class PreparedScene:
    scene: SceneAnnotation
    image: torch.Tensor  # (3, H, W)
    targets: TargetSet
    masks: torch.Tensor  # (I, h, w) GT masks at mask-prediction stride
    semantic: torch.Tensor | None = None  # (H/4, W/4) labels


def prepare_scene(scene: SceneAnnotation, cfg: ModelConfig, task: str = "instance",
                  aux_semantic: bool = False) -> PreparedScene:
    targets = assign_targets(scene, cfg)
    stride = int(round(cfg.mask_stride))
    if scene.instances:
        # panoptic training uses visible masks, instance training amodal ones
        src = np.stack([i.visible if task == "panoptic" else i.mask for i in scene.instances])
        masks = torch.from_numpy(downsample_gt_mask(src, stride))
    else:
        h, w = scene.size
        masks = torch.zeros(0, -(-h // stride), -(-w // stride), dtype=DTYPE)
    sem = None
    if task == "panoptic":
        sem = torch.from_numpy(scene.semantic_labels()[2::4, 2::4].copy())
    elif aux_semantic:
        lab = np.zeros(scene.size, dtype=np.int64)
        for inst in scene.instances:
            lab[inst.visible] = inst.class_id
        sem = torch.from_numpy(lab[2::4, 2::4].copy())
    image = torch.from_numpy(scene.image_tensor())
    return PreparedScene(scene, image, targets, masks, sem)


def _flatten(heads, name: str) -> torch.Tensor:
    """(B, C, H, W) per level -> (B, L, C) in (level, y, x) order."""
    maps = [getattr(h, name) for h in heads.values()]
    return torch.cat([m.flatten(2).transpose(1, 2) for m in maps], dim=1)


def compute_losses(model: CondInst, batch: list[PreparedScene], task: str = "instance",
                   sample_cap: int = 64, aux_semantic: bool = False) -> LossBreakdown:
    images = torch.stack([p.image for p in batch])
    out = model(images)
    cls = _flatten(out.heads, "cls_logits")
    ctr = _flatten(out.heads, "ctr_logits")[..., 0]
    box = _flatten(out.heads, "box_reg")
    ctrl = _flatten(out.heads, "controller")

    l_cls, l_box, l_ctr = [], [], []
    img_idx, points, thetas, gts, mask_weights = [], [], [], [], []
    total_pos = 0
    for b, p in enumerate(batch):
        t = p.targets
        labels = torch.from_numpy(t.labels)
        npos = t.num_pos
        total_pos += npos
        l_cls.append(focal_loss(cls[b], labels, npos))
        pos = torch.from_numpy(t.positive_indices)
        ctr_t = torch.from_numpy(t.centerness[t.positive_indices])
        l_box.append(giou_loss(box[b, pos], torch.from_numpy(t.box_targets[t.positive_indices]), ctr_t))
        l_ctr.append(centerness_loss(ctr[b, pos], ctr_t))
        if npos == 0:
            continue
        with torch.no_grad():
            probs = torch.sigmoid(cls[b]).numpy()
        scores = np.zeros(len(t.labels))
        scores[t.positive_indices] = probs[t.positive_indices, t.labels[t.positive_indices] - 1]
        chosen = sample_positives(t, scores, sample_cap)
        img_idx.append(torch.full((len(chosen),), b, dtype=torch.long))
        points.append(torch.from_numpy(t.points[chosen]))
        thetas.append(ctrl[b, torch.from_numpy(chosen)])
        gts.append(p.masks[torch.from_numpy(t.instance_index[chosen])])
        mask_weights.append(torch.full((len(chosen),), 1.0 / npos, dtype=DTYPE))

    n = len(batch)
    if thetas:
        logits = model.mask_logits(out.bottom, torch.cat(img_idx), torch.cat(points), torch.cat(thetas))
        gt = torch.cat(gts)
        logits = logits[:, 0, :gt.shape[1], :gt.shape[2]]
        dice = dice_loss(torch.sigmoid(logits), gt)
        # per image: sum of dice over sampled / N_pos of that image, then mean over images
        l_mask_t = (dice * torch.cat(mask_weights)).sum() / n
    else:
        l_mask_t = out.bottom.sum() * 0.0

    l_pano = l_aux = None
    if out.semantic is not None and batch[0].semantic is not None:
        sem_loss = semantic_ce_loss(out.semantic, torch.stack([p.semantic for p in batch]))
        if task == "panoptic":
            l_pano = sem_loss
        elif aux_semantic:
            l_aux = sem_loss

    return total_loss(torch.stack(l_cls).mean(), torch.stack(l_box).mean(), torch.stack(l_ctr).mean(),
                      l_mask_t, l_pano, l_aux, num_pos=total_pos)


# ---------------------------------------------------------------------------
# optimisation


def make_model_config(base: ModelConfig, train_cfg: TrainConfig, num_stuff: int = 2) -> ModelConfig:
    if train_cfg.task == "panoptic":
        return replace(base, semantic_classes=base.num_classes + num_stuff)
    if train_cfg.aux_semantic:
        return replace(base, semantic_classes=base.num_classes + 1)
    return base


def build_optimizer(model: CondInst, cfg: TrainConfig) -> torch.optim.SGD:
    no_decay = model.no_decay_names()
    decay, plain = [], []
    for name, p in model.named_parameters():
        (plain if name in no_decay else decay).append(p)
    return torch.optim.SGD([{"params": decay, "weight_decay": cfg.weight_decay},
                            {"params": plain, "weight_decay": 0.0}],
                           lr=cfg.lr, momentum=cfg.momentum)


@dataclass
class TrainResult:
    model: CondInst
    log: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None
    aborted: str | None = None


def train(model_cfg: ModelConfig, scenes: list[SceneAnnotation] | str | Path, cfg: TrainConfig,
          out_dir: str | Path | None = None, progress: bool = False) -> TrainResult:
    """Train from scratch; deterministic for a given ``cfg.seed``.

    Writes ``loss_log.csv`` and checkpoints under ``out_dir`` when given.
    """
    if not isinstance(scenes, list):
        scenes = read_dataset(scenes)
    if not scenes:
        raise ValueError("training needs at least one scene")
    torch.manual_seed(cfg.seed)
    model = CondInst(model_cfg, seed=cfg.seed)
    model.train()
    opt = build_optimizer(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    cache: dict[tuple[int, bool], PreparedScene] = {}

    def get(i: int, flipped: bool) -> PreparedScene:
        key = (i, flipped)
        if key not in cache:
            s = flip_scene(scenes[i]) if flipped else scenes[i]
            cache[key] = prepare_scene(s, model_cfg, cfg.task, cfg.aux_semantic)
        return cache[key]

    order = np.zeros(0, dtype=np.int64)
    last_good = None
    rows: list[dict] = []
    result = TrainResult(model, rows)
    log_file = writer = None
    if out is not None:
        log_file = open(out / "loss_log.csv", "w", newline="")
        writer = csv.DictWriter(log_file, fieldnames=LOG_FIELDS)
        writer.writeheader()
    try:
        for it in range(cfg.iterations):
            if len(order) < cfg.batch_size:
                order = np.concatenate([order, rng.permutation(len(scenes))])
            idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
            flips = rng.random(cfg.batch_size) < 0.5 if cfg.flip else np.zeros(cfg.batch_size, bool)
            batch = [get(int(i), bool(f)) for i, f in zip(idx, flips)]
            lr = cfg.lr_at(it)
            for g in opt.param_groups:
                g["lr"] = lr
            try:
                losses = compute_losses(model, batch, cfg.task, cfg.sample_cap, cfg.aux_semantic)
            except NonFiniteLossError as exc:
                result.aborted = f"iteration {it}: {exc}"
                log.error("aborting: %s", result.aborted)
                if last_good is not None:
                    model.load_state_dict(last_good)
                if out is not None:
                    result.checkpoint = save_checkpoint(model, out / "checkpoint",
                                                        {"iteration": max(it - 1, 0), "aborted": result.aborted})
                raise
            # parameters that produced a finite loss, restored if a later step diverges
            last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
            opt.zero_grad(set_to_none=True)
            losses.total.backward()
            opt.step()
            row = {"iteration": it + 1, "lr": lr, **losses.as_row()}
            rows.append(row)
            if writer is not None:
                writer.writerow({k: row.get(k) for k in LOG_FIELDS})
            if progress and (it + 1) % 100 == 0:
                log.info("iter %d total %.4f mask %.4f", it + 1, row["total"], row["l_mask"])
            if out is not None and cfg.checkpoint_at_milestones and (it + 1) in cfg.milestones:
                save_checkpoint(model, out / f"checkpoint_{it + 1}", {"iteration": it + 1})
    finally:
        if log_file is not None:
            log_file.close()
    model.eval()
    if out is not None:
        result.checkpoint = save_checkpoint(model, out / "checkpoint",
                                            {"iteration": cfg.iterations, "train_config": asdict(cfg)})
    return result


def baseline_config(cfg: ModelConfig) -> ModelConfig:
    """Same capacity as ``cfg`` but one static mask head shared by all instances, no coordinates."""
    return replace(cfg, mask_head_mode="static", coord_mode="none")


def train_vanilla_fcn_baseline(model_cfg: ModelConfig, scenes, cfg: TrainConfig,
                               out_dir: str | Path | None = None) -> TrainResult:
    return train(baseline_config(model_cfg), scenes, cfg, out_dir)
