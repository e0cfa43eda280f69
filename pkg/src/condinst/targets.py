"""Ground-truth to FPN-location assignment (center sampling, FCOS ranges) and mask targets."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import LEVEL_STRIDES, ModelConfig, map_location
from .synthdata import SceneAnnotation

# Upper regression bound per level at toy scale; the finest configured level
# starts at 0 and the coarsest is unbounded.
LEVEL_RANGE_BOUNDS = {"P2": 8, "P3": 16, "P4": 32, "P5": 64, "P6": 128, "P7": math.inf}
CENTER_RADIUS = 1.5


def regression_ranges(levels, bounds: dict[str, float] | None = None) -> dict[str, tuple[float, float]]:
    bounds = bounds or LEVEL_RANGE_BOUNDS
    out, lo = {}, 0.0
    for i, lv in enumerate(levels):
        hi = math.inf if i == len(levels) - 1 else bounds[lv]
        out[lv] = (lo, hi)
        lo = hi
    return out


def mass_center(mask: np.ndarray) -> tuple[float, float]:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise ValueError("mass center of an empty mask is undefined")
    return float(xs.mean()), float(ys.mean())


def center_region(mask: np.ndarray, stride: int, r: float = CENTER_RADIUS, box=None, clip: bool = True):
    """``(x1, y1, x2, y2)`` of the mass-centred sampling box, clipped to the tight box."""
    cx, cy = mass_center(mask)
    region = [cx - r * stride, cy - r * stride, cx + r * stride, cy + r * stride]
    if not clip:
        return tuple(region)
    if box is None:
        ys, xs = np.nonzero(mask)
        box = (xs.min() - 0.5, ys.min() - 0.5, xs.max() + 0.5, ys.max() + 0.5)
    h, w = mask.shape
    return (max(region[0], box[0], -0.5), max(region[1], box[1], -0.5),
            min(region[2], box[2], w - 0.5), min(region[3], box[3], h - 0.5))


def centerness_target(l, t, r, b):
    """sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b)); a zero max gives 0."""
    l, t, r, b = (np.asarray(v, dtype=np.float64) for v in (l, t, r, b))
    lr_max, tb_max = np.maximum(l, r), np.maximum(t, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        lr = np.where(lr_max > 0, np.minimum(l, r) / np.where(lr_max > 0, lr_max, 1), 0.0)
        tb = np.where(tb_max > 0, np.minimum(t, b) / np.where(tb_max > 0, tb_max, 1), 0.0)
    out = np.sqrt(np.clip(lr * tb, 0.0, 1.0))
    return float(out) if out.ndim == 0 else out


@dataclass
class TargetSet:
    """Per-location targets flattened in (level, y, x) order across configured levels."""

    levels: list[str]
    level_shapes: dict[str, tuple[int, int]]
    level_index: np.ndarray  # (L,) index into ``levels``
    cells: np.ndarray  # (L, 2) feature-map (x, y)
    points: np.ndarray  # (L, 2) input-space (px, py)
    strides: np.ndarray  # (L,)
    labels: np.ndarray  # (L,) 0 = background, else class id
    box_targets: np.ndarray  # (L, 4) l, t, r, b (zero for negatives)
    centerness: np.ndarray  # (L,)
    instance_index: np.ndarray  # (L,) -1 for negatives
    positives_per_instance: list[np.ndarray] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    @property
    def num_pos(self) -> int:
        return int((self.labels > 0).sum())

    @property
    def positive_indices(self) -> np.ndarray:
        return np.nonzero(self.labels > 0)[0]


def location_grid(levels, image_size: tuple[int, int]):
    """Flattened cells, points, strides and level indices for ``levels``."""
    h, w = image_size
    cells, points, strides, level_index, shapes = [], [], [], [], {}
    for li, lv in enumerate(levels):
        s = LEVEL_STRIDES[lv]
        hl, wl = math.ceil(h / s), math.ceil(w / s)
        shapes[lv] = (hl, wl)
        ys, xs = np.mgrid[0:hl, 0:wl]
        c = np.stack([xs.ravel(), ys.ravel()], axis=1)
        cells.append(c)
        points.append(np.stack(map_location(c[:, 0], c[:, 1], s), axis=1))
        strides.append(np.full(len(c), s))
        level_index.append(np.full(len(c), li))
    return (np.concatenate(cells), np.concatenate(points).astype(np.float64), np.concatenate(strides),
            np.concatenate(level_index), shapes)


def assign_targets(scene: SceneAnnotation, cfg: ModelConfig, radius: float = CENTER_RADIUS,
                   range_bounds: dict[str, float] | None = None) -> TargetSet:
    levels = list(cfg.fpn_levels)
    cells, points, strides, level_index, shapes = location_grid(levels, scene.size)
    ranges = regression_ranges(levels, range_bounds)
    n_loc, n_inst = len(points), len(scene.instances)

    labels = np.zeros(n_loc, dtype=np.int64)
    box_t = np.zeros((n_loc, 4))
    inst_idx = np.full(n_loc, -1, dtype=np.int64)
    flags: list[str] = []

    if n_inst:
        px, py = points[:, 0:1], points[:, 1:2]
        boxes = np.array([inst.box for inst in scene.instances])  # (I, 4)
        areas = np.array([inst.area for inst in scene.instances], dtype=np.float64)
        centers = np.array([mass_center(inst.mask) for inst in scene.instances])  # (I, 2)
        h, w = scene.size
        rs = radius * strides[:, None].astype(np.float64)  # (L, 1)
        rx1 = np.maximum(np.maximum(centers[None, :, 0] - rs, boxes[None, :, 0]), -0.5)
        ry1 = np.maximum(np.maximum(centers[None, :, 1] - rs, boxes[None, :, 1]), -0.5)
        rx2 = np.minimum(np.minimum(centers[None, :, 0] + rs, boxes[None, :, 2]), w - 0.5)
        ry2 = np.minimum(np.minimum(centers[None, :, 1] + rs, boxes[None, :, 3]), h - 0.5)
        in_center = (px >= rx1) & (px <= rx2) & (py >= ry1) & (py <= ry2)  # (L, I)

        dist = np.stack([px - boxes[None, :, 0], py - boxes[None, :, 1],
                         boxes[None, :, 2] - px, boxes[None, :, 3] - py], axis=-1)  # (L, I, 4)
        max_d = dist.max(axis=-1)
        lo = np.array([ranges[levels[li]][0] for li in level_index])[:, None]
        hi = np.array([ranges[levels[li]][1] for li in level_index])[:, None]
        in_range = (max_d > lo) & (max_d <= hi)
        ok = in_center & in_range & (dist.min(axis=-1) >= 0)

        cand_area = np.where(ok, areas[None, :], np.inf)
        best = np.argmin(cand_area, axis=1)  # first minimum -> lower index on ties
        pos = np.isfinite(cand_area[np.arange(n_loc), best])
        inst_idx[pos] = best[pos]
        labels[pos] = np.array([inst.class_id for inst in scene.instances])[best[pos]]
        box_t[pos] = dist[np.nonzero(pos)[0], best[pos]]

    ctr = np.zeros(n_loc)
    pmask = labels > 0
    if pmask.any():
        ctr[pmask] = centerness_target(*box_t[pmask].T)
    per_inst = [np.nonzero(inst_idx == i)[0] for i in range(n_inst)]
    for i, p in enumerate(per_inst):
        if len(p) == 0:
            flags.append(f"instance {i} has no positive locations")
    return TargetSet(levels, shapes, level_index, cells, points, strides, labels, box_t, ctr,
                     inst_idx, per_inst, flags)


def sample_positives(targets: TargetSet, scores: np.ndarray, cap: int = 64) -> np.ndarray:
    """Top-scoring positives of each instance, taken round-robin up to ``cap``.

    ``scores`` holds, per location, the predicted probability of that
    location's target class.  Ties fall back to (level, y, x) order, which is
    the flattened index order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    ranked = []
    for idx in targets.positives_per_instance:
        if len(idx):
            order = np.lexsort((idx, -scores[idx]))
            ranked.append(idx[order])
    chosen: list[int] = []
    depth = 0
    while len(chosen) < cap:
        round_ = [r[depth] for r in ranked if depth < len(r)]
        if not round_:
            break
        round_.sort(key=lambda i: (-scores[i], i))
        chosen.extend(round_[:cap - len(chosen)])
        depth += 1
    return np.array(chosen, dtype=np.int64)


def downsample_gt_mask(mask: np.ndarray, out_stride: int, soft: bool = False) -> np.ndarray:
    """Block-average pooling by ``out_stride``; hard targets threshold at 0.5."""
    if out_stride < 1 or int(out_stride) != out_stride:
        raise ValueError(f"out_stride must be a positive integer, got {out_stride}")
    s = int(out_stride)
    m = np.asarray(mask, dtype=np.float64)
    lead, (h, w) = m.shape[:-2], m.shape[-2:]
    ph, pw = (-h) % s, (-w) % s
    if ph or pw:
        m = np.pad(m, [(0, 0)] * len(lead) + [(0, ph), (0, pw)])
    hh, ww = m.shape[-2:]
    avg = m.reshape(*lead, hh // s, s, ww // s, s).mean(axis=(-3, -1))
    return avg if soft else (avg >= 0.5).astype(np.float64)
