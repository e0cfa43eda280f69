"""Detection decoding, box/mask NMS, dynamic mask computation and panoptic stitching."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .model import LEVEL_STRIDES, CondInst, HeadOutputs, map_location
from .numerics import DTYPE, resize, upsample

SCORE_THRESHOLD = 0.05
PRE_NMS_TOPK = 1000
NMS_IOU = 0.6
MASK_NMS_IOU = 0.6
MAX_DETECTIONS = 100
MASK_THRESHOLD = 0.5
PANOPTIC_SCORE_MIN = 0.45
PANOPTIC_OVERLAP_DISCARD = 0.40
VOID = 0
RLE_DOC = ("binary masks are run-length encoded in row-major order as alternating run lengths, "
           "starting with a (possibly empty) run of background pixels")


class BoxAccessCounter:
    """Counts reads of predicted boxes, so callers can prove a path never consults the box head."""

    reads = 0

    @classmethod
    def reset(cls) -> None:
        cls.reads = 0


@dataclass
class Detection:
    class_id: int
    score: float
    level: str
    cell: tuple[int, int]
    point: tuple[float, float]
    theta: torch.Tensor
    _box: tuple[float, float, float, float] | None = None
    cls_prob: float = 0.0
    ctr_prob: float = 0.0

    @property
    def box(self):
        BoxAccessCounter.reads += 1
        return self._box


@dataclass
class InstanceResult:
    class_id: int
    score: float
    soft: np.ndarray  # (H, W) mask probabilities at input resolution
    detection: Detection | None = None
    flags: list[str] = field(default_factory=list)

    @property
    def binary(self) -> np.ndarray:
        return self.soft >= MASK_THRESHOLD

    @property
    def area(self) -> int:
        return int(self.binary.sum())

    def mask_box(self) -> tuple[float, float, float, float] | None:
        ys, xs = np.nonzero(self.binary)
        if len(xs) == 0:
            return None
        return (xs.min() - 0.5, ys.min() - 0.5, xs.max() + 0.5, ys.max() + 0.5)


@dataclass
class Segment:
    category: int
    instance: int | None
    area: int
    score: float | None = None

    @property
    def isthing(self) -> bool:
        return self.instance is not None


@dataclass
class PanopticMap:
    ids: np.ndarray  # (H, W) int32 segment ids, 0 = void
    segments: dict[int, Segment]

    def category_map(self) -> np.ndarray:
        cat = np.zeros(self.ids.shape, dtype=np.int64)
        for sid, seg in self.segments.items():
            cat[self.ids == sid] = seg.category
        return cat


# ---------------------------------------------------------------------------
# decoding and NMS


def decode_detections(heads: dict[str, HeadOutputs], batch_index: int = 0,
                      score_threshold: float = SCORE_THRESHOLD, pre_nms_topk: int = PRE_NMS_TOPK,
                      with_boxes: bool = True) -> list[Detection]:
    """Per-location detections with score ``sqrt(cls_prob * ctr_prob)`` above the threshold."""
    dets: list[Detection] = []
    with torch.no_grad():
        for lv, h in heads.items():
            s = LEVEL_STRIDES[lv]
            cls = torch.sigmoid(h.cls_logits[batch_index])  # (C, H, W)
            ctr = torch.sigmoid(h.ctr_logits[batch_index, 0])
            prob, cls_id = cls.max(dim=0)
            score = torch.sqrt(prob * ctr)
            flat = score.flatten()
            keep = torch.nonzero(flat > score_threshold)[:, 0]
            if len(keep) > pre_nms_topk:
                keep = keep[torch.argsort(-flat[keep], stable=True)[:pre_nms_topk]]
            w = score.shape[1]
            box_reg = h.box_reg[batch_index] if with_boxes else None
            for k in keep.tolist():
                y, x = divmod(k, w)
                px, py = map_location(x, y, s)
                box = None
                if box_reg is not None:
                    l, t, r, b = box_reg[:, y, x].tolist()
                    box = (px - l, py - t, px + r, py + b)
                dets.append(Detection(int(cls_id[y, x]) + 1, float(score[y, x]), lv, (x, y),
                                      (float(px), float(py)), h.controller[batch_index, :, y, x].detach(),
                                      box, float(prob[y, x]), float(ctr[y, x])))
    return dets


def box_iou(a, b) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def mask_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, H, W) and (M, H, W) binary masks; empty vs empty is 1."""
    a = a.reshape(len(a), -1).astype(np.float64)
    b = b.reshape(len(b), -1).astype(np.float64)
    inter = a @ b.T
    union = a.sum(1)[:, None] + b.sum(1)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 1.0)


def greedy_nms(scores: np.ndarray, classes: np.ndarray, iou: np.ndarray, threshold: float,
               max_keep: int | None = None) -> list[int]:
    """Greedy suppression by descending score (ties by index) within each class."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep: list[int] = []
    suppressed = np.zeros(len(scores), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        if max_keep is not None and len(keep) >= max_keep:
            break
        suppressed |= (iou[i] > threshold) & (classes == classes[i])
    return keep


def box_nms(dets: list[Detection], iou_threshold: float = NMS_IOU,
            max_keep: int = MAX_DETECTIONS) -> list[Detection]:
    if not dets:
        return []
    boxes = np.array([d.box for d in dets])
    keep = greedy_nms(np.array([d.score for d in dets]), np.array([d.class_id for d in dets]),
                      box_iou(boxes, boxes), iou_threshold, max_keep)
    return [dets[i] for i in keep]


def mask_nms(results: list[InstanceResult], iou_threshold: float = MASK_NMS_IOU,
             max_keep: int = MAX_DETECTIONS) -> list[InstanceResult]:
    if not results:
        return []
    masks = np.stack([r.binary for r in results])
    keep = greedy_nms(np.array([r.score for r in results]), np.array([r.class_id for r in results]),
                      mask_iou_matrix(masks, masks), iou_threshold, max_keep)
    return [results[i] for i in keep]


# ---------------------------------------------------------------------------
# masks


def compute_masks(model: CondInst, dets: list[Detection], bottom: torch.Tensor,
                  image_size: tuple[int, int]) -> list[InstanceResult]:
    """Run each detection's generated head over ``bottom`` (1, C, H, W)."""
    if not dets:
        return []
    with torch.no_grad():
        probs = soft_masks(model, dets, bottom, image_size).numpy()
    out = []
    for d, p in zip(dets, probs):
        r = InstanceResult(d.class_id, d.score, p, d)
        if r.area == 0:
            r.flags.append("empty_mask")
        out.append(r)
    return out


def soft_masks(model: CondInst, dets: list[Detection], bottom: torch.Tensor,
               image_size: tuple[int, int]) -> torch.Tensor:
    """(K, H, W) mask probabilities: head logits, sigmoid, x-factor upsample, resize to input."""
    cfg = model.cfg
    k = len(dets)
    points = torch.tensor([d.point for d in dets], dtype=DTYPE)
    thetas = torch.stack([d.theta for d in dets]).to(bottom.dtype)
    logits = model.mask_logits(bottom, torch.zeros(k, dtype=torch.long), points, thetas, upsampled=False)
    probs = upsample(torch.sigmoid(logits), cfg.upsample_factor)
    return resize(probs, image_size)[:, 0]


# ---------------------------------------------------------------------------
# panoptic


def semantic_map(semantic_logits: torch.Tensor, image_size: tuple[int, int]) -> np.ndarray:
    """Arg-max category index (category - 1) at input resolution from (L, h, w) logits."""
    with torch.no_grad():
        up = resize(semantic_logits[None], image_size)[0]
    return up.argmax(0).numpy()


def panoptic_merge(instances: list[InstanceResult], semantic: np.ndarray, num_thing_classes: int,
                   score_min: float = PANOPTIC_SCORE_MIN,
                   overlap_discard: float = PANOPTIC_OVERLAP_DISCARD) -> PanopticMap:
    """Score-ordered instance pasting followed by stuff fill.

    ``semantic`` holds category indices (category - 1); thing categories come
    first.  Semantic thing pixels not covered by a kept instance become void.
    """
    h, w = semantic.shape
    ids = np.zeros((h, w), dtype=np.int32)
    segments: dict[int, Segment] = {}
    order = sorted(range(len(instances)), key=lambda i: (-instances[i].score, i))
    next_id = 1
    for i in order:
        inst = instances[i]
        if inst.score < score_min:
            continue
        mask = inst.binary
        total = int(mask.sum())
        if total == 0:
            continue
        free = mask & (ids == VOID)
        kept = int(free.sum())
        if (total - kept) / total > overlap_discard:
            continue
        ids[free] = next_id
        segments[next_id] = Segment(inst.class_id, i, kept, inst.score)
        next_id += 1
    stuff_base = next_id
    unclaimed = ids == VOID
    for label in np.unique(semantic[unclaimed]):
        category = int(label) + 1
        if category <= num_thing_classes:
            continue
        region = unclaimed & (semantic == label)
        sid = stuff_base + category - num_thing_classes - 1
        ids[region] = sid
        segments[sid] = Segment(category, None, int(region.sum()))
    void_area = int((ids == VOID).sum())
    if void_area:
        segments[VOID] = Segment(0, None, void_area)
    return PanopticMap(ids, segments)


def panoptic_from_scene(scene) -> PanopticMap:
    """Ground-truth panoptic map of a synthetic scene in :class:`PanopticMap` form."""
    segments = {}
    for sid, (cat, inst) in scene.segments.items():
        segments[int(sid)] = Segment(cat, inst if inst >= 0 else None, int((scene.panoptic == sid).sum()))
    return PanopticMap(scene.panoptic.astype(np.int32), segments)


# ---------------------------------------------------------------------------
# end-to-end


@dataclass
class InferenceConfig:
    score_threshold: float = SCORE_THRESHOLD
    pre_nms_topk: int = PRE_NMS_TOPK
    nms: str = "box"  # or "mask"
    nms_iou: float = NMS_IOU
    mask_nms_iou: float = MASK_NMS_IOU
    max_detections: int = MAX_DETECTIONS
    panoptic_score_min: float = PANOPTIC_SCORE_MIN
    panoptic_overlap_discard: float = PANOPTIC_OVERLAP_DISCARD

    def __post_init__(self):
        if self.nms not in ("box", "mask"):
            raise ValueError(f"nms must be 'box' or 'mask', got {self.nms!r}")


@dataclass
class ImagePrediction:
    instances: list[InstanceResult]
    panoptic: PanopticMap | None = None
    semantic: np.ndarray | None = None


def infer_image(model: CondInst, image: np.ndarray | torch.Tensor, cfg: InferenceConfig | None = None,
                num_thing_classes: int | None = None) -> ImagePrediction:
    """Instance (and, with a semantic branch, panoptic) prediction for one (3, H, W) image."""
    cfg = cfg or InferenceConfig()
    x = torch.as_tensor(image, dtype=DTYPE)[None]
    size = tuple(x.shape[-2:])
    with torch.no_grad():
        out = model(x)
    mask_path = cfg.nms == "mask"
    dets = decode_detections(out.heads, 0, cfg.score_threshold, cfg.pre_nms_topk, with_boxes=not mask_path)
    if mask_path:
        results = mask_nms(compute_masks(model, dets, out.bottom, size), cfg.mask_nms_iou, cfg.max_detections)
    else:
        results = compute_masks(model, box_nms(dets, cfg.nms_iou, cfg.max_detections), out.bottom, size)
    pred = ImagePrediction(results)
    if out.semantic is not None:
        n_things = num_thing_classes if num_thing_classes is not None else model.cfg.num_classes
        pred.semantic = semantic_map(out.semantic[0], size)
        pred.panoptic = panoptic_merge(results, pred.semantic, n_things,
                                       cfg.panoptic_score_min, cfg.panoptic_overlap_discard)
    return pred


# ---------------------------------------------------------------------------
# files


def encode_rle(mask: np.ndarray) -> list[int]:
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    return ([0] + runs) if flat[0] else runs


def decode_rle(counts: list[int], shape: tuple[int, int]) -> np.ndarray:
    if sum(counts) != shape[0] * shape[1]:
        raise ValueError(f"RLE covers {sum(counts)} pixels, mask has {shape[0] * shape[1]}")
    vals = np.zeros(len(counts), dtype=bool)
    vals[1::2] = True
    return np.repeat(vals, counts).reshape(shape)


def write_prediction(pred: ImagePrediction, directory: str | Path, name: str = "pred") -> dict:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    h, w = pred.instances[0].soft.shape if pred.instances else (None, None)
    if pred.panoptic is not None:
        h, w = pred.panoptic.ids.shape
    doc = {"rle_format": RLE_DOC, "size": [h, w], "detections": []}
    for r in pred.instances:
        box = r.detection._box if r.detection is not None and r.detection._box is not None else r.mask_box()
        doc["detections"].append({
            "class_id": r.class_id,
            "score": r.score,
            "box": [float(v) for v in box] if box is not None else None,
            "area": r.area,
            "rle": encode_rle(r.binary),
        })
    if pred.panoptic is not None:
        Image.fromarray(pred.panoptic.ids.astype(np.uint16)).save(root / f"{name}_panoptic.png")
        segs = {str(k): {"category": s.category, "instance": s.instance, "area": s.area, "score": s.score,
                         "isthing": s.isthing} for k, s in pred.panoptic.segments.items()}
        (root / f"{name}_segments.json").write_text(json.dumps(segs, indent=1))
        doc["panoptic_png"] = f"{name}_panoptic.png"
        doc["segments_json"] = f"{name}_segments.json"
    (root / f"{name}.json").write_text(json.dumps(doc, indent=1))
    return doc


def read_prediction(path: str | Path) -> dict:
    """Load a prediction JSON and decode its masks into ``mask`` arrays."""
    doc = json.loads(Path(path).read_text())
    h, w = doc["size"]
    for det in doc["detections"]:
        det["mask"] = decode_rle(det["rle"], (h, w))
    return doc
