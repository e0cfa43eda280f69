"""Mask IoU, COCO-style mask AP, panoptic quality and the mask-head timing benchmark."""
from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .inference import PanopticMap
from .model import CondInst
from .numerics import upsample

IOU_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def mask_iou(a: np.ndarray, b: np.ndarray, return_flag: bool = False):
    """|a & b| / |a | b|; two empty masks count as identical (1.0).

    With ``return_flag`` the result is ``(iou, both_empty)``.
    """
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    iou = 1.0 if union == 0 else float(np.logical_and(a, b).sum() / union)
    return (iou, bool(union == 0)) if return_flag else iou


# ---------------------------------------------------------------------------
# AP


@dataclass
class APReport:
    AP: float
    AP50: float
    AP75: float
    per_class: dict[int, float]
    num_gt: int
    num_pred: int
    per_threshold: dict[float, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"AP": self.AP, "AP50": self.AP50, "AP75": self.AP75,
                "per_class": {str(k): v for k, v in self.per_class.items()},
                "per_threshold": {f"{k:.2f}": v for k, v in self.per_threshold.items()},
                "num_gt": self.num_gt, "num_pred": self.num_pred}


def interpolated_ap(tp: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP from score-ordered TP flags."""
    if num_gt == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    # monotone envelope from the right
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    vals = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(vals.mean())


def evaluate_ap(predictions, ground_truths, iou_thresholds=IOU_THRESHOLDS) -> APReport:
    """COCO-style mask AP.

    ``predictions[i]`` is a list of ``(class_id, score, mask)`` for image ``i``;
    ``ground_truths[i]`` a list of ``(class_id, mask)``.  Matching is greedy
    by descending score, each ground truth matched at most once, per class and
    threshold.  Classes without ground truth are left out of the mean.
    """
    if len(predictions) != len(ground_truths):
        raise ValueError("predictions and ground truths cover different numbers of images")
    thresholds = [float(t) for t in iou_thresholds]
    classes = sorted({c for gts in ground_truths for c, _ in gts})
    num_pred = sum(len(p) for p in predictions)
    num_gt = sum(len(g) for g in ground_truths)

    ap = np.full((len(thresholds), len(classes)), np.nan)
    for ci, c in enumerate(classes):
        preds = []  # (score, image, index)
        ious = {}
        n_gt = 0
        for img, (p_list, g_list) in enumerate(zip(predictions, ground_truths)):
            gt_masks = [m for cc, m in g_list if cc == c]
            n_gt += len(gt_masks)
            p_here = [(s, m) for cc, s, m in p_list if cc == c]
            for j, (s, m) in enumerate(p_here):
                preds.append((float(s), img, j))
                ious[(img, j)] = np.array([mask_iou(m, g) for g in gt_masks])
        preds.sort(key=lambda t: -t[0])  # stable: equal scores keep input order
        for ti, thr in enumerate(thresholds):
            matched: dict[int, set[int]] = {}
            tp = np.zeros(len(preds))
            for k, (_, img, j) in enumerate(preds):
                row = ious[(img, j)]
                used = matched.setdefault(img, set())
                best, best_iou = -1, thr
                for g, v in enumerate(row):
                    if g in used:
                        continue
                    if v >= best_iou:
                        best, best_iou = g, v
                if best >= 0:
                    used.add(best)
                    tp[k] = 1
            ap[ti, ci] = interpolated_ap(tp, n_gt)

    def mean(x):
        x = x[~np.isnan(x)]
        return float(x.mean()) if x.size else 0.0

    per_thr = {t: mean(ap[i]) for i, t in enumerate(thresholds)}
    return APReport(
        AP=mean(ap),
        AP50=per_thr.get(0.5, float("nan")),
        AP75=per_thr.get(0.75, float("nan")),
        per_class={c: mean(ap[:, ci]) for ci, c in enumerate(classes)},
        num_gt=num_gt,
        num_pred=num_pred,
        per_threshold=per_thr,
    )


# ---------------------------------------------------------------------------
# PQ


@dataclass
class PQReport:
    PQ: float
    SQ: float
    RQ: float
    PQ_th: float
    PQ_st: float
    per_class: dict[int, dict] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"PQ": self.PQ, "SQ": self.SQ, "RQ": self.RQ, "PQ_th": self.PQ_th, "PQ_st": self.PQ_st,
                "per_class": {str(k): v for k, v in self.per_class.items()}}


class PQAccumulator:
    """Per-category TP/FP/FN and IoU sums across images."""

    def __init__(self):
        self.stats: dict[int, dict] = {}
        self.isthing: dict[int, bool] = {}

    def _cat(self, c: int) -> dict:
        return self.stats.setdefault(c, {"tp": 0, "fp": 0, "fn": 0, "iou": 0.0})

    def update(self, pred: PanopticMap, gt: PanopticMap) -> None:
        if pred.ids.shape != gt.ids.shape:
            raise ValueError(f"panoptic maps differ in size: {pred.ids.shape} vs {gt.ids.shape}")
        p_ids, g_ids = pred.ids.ravel(), gt.ids.ravel()
        pairs, counts = np.unique(np.stack([p_ids, g_ids]), axis=1, return_counts=True)
        inter = {(int(p), int(g)): int(n) for (p, g), n in zip(pairs.T, counts)}
        p_area = {k: int(v) for k, v in zip(*np.unique(p_ids, return_counts=True))}
        g_area = {k: int(v) for k, v in zip(*np.unique(g_ids, return_counts=True))}

        for sid, seg in list(pred.segments.items()) + list(gt.segments.items()):
            if seg.category:
                self.isthing[seg.category] = seg.isthing

        matched_p, matched_g = set(), set()
        for (p, g), n in inter.items():
            if p == 0 or g == 0:
                continue
            ps, gs = pred.segments.get(p), gt.segments.get(g)
            if ps is None or gs is None or ps.category != gs.category:
                continue
            union = p_area[p] + g_area[g] - n - inter.get((p, 0), 0)
            iou = n / union if union else 0.0
            if iou > 0.5:
                st = self._cat(gs.category)
                st["tp"] += 1
                st["iou"] += iou
                matched_p.add(p)
                matched_g.add(g)
        for g, seg in gt.segments.items():
            if g != 0 and g not in matched_g and g in g_area:
                self._cat(seg.category)["fn"] += 1
        for p, seg in pred.segments.items():
            if p == 0 or p in matched_p or p not in p_area:
                continue
            # predictions lying mostly on ground-truth void are ignored
            if inter.get((p, 0), 0) / p_area[p] > 0.5:
                continue
            self._cat(seg.category)["fp"] += 1

    def report(self) -> PQReport:
        per = {}
        for c, st in sorted(self.stats.items()):
            denom = st["tp"] + 0.5 * st["fp"] + 0.5 * st["fn"]
            if denom == 0:
                continue
            sq = st["iou"] / st["tp"] if st["tp"] else 0.0
            rq = st["tp"] / denom
            per[c] = {**st, "pq": st["iou"] / denom, "sq": sq, "rq": rq, "isthing": self.isthing.get(c, False)}

        def avg(key, sel=lambda v: True):
            vals = [v[key] for v in per.values() if sel(v)]
            return float(np.mean(vals)) if vals else 0.0

        return PQReport(avg("pq"), avg("sq"), avg("rq"), avg("pq", lambda v: v["isthing"]),
                        avg("pq", lambda v: not v["isthing"]), per)


def evaluate_pq(pred, gt) -> PQReport:
    """PQ/SQ/RQ for one map pair, or for aligned lists of maps."""
    acc = PQAccumulator()
    if isinstance(pred, PanopticMap):
        pred, gt = [pred], [gt]
    for p, g in zip(pred, gt):
        acc.update(p, g)
    return acc.report()


# ---------------------------------------------------------------------------
# timing


@dataclass
class TimingRow:
    k: int
    median_ms: float
    p10_ms: float
    p90_ms: float
    repeats: int
    inner: int


@dataclass
class TimingReport:
    rows: list[TimingRow]
    total_inference_ms: float  # backbone + heads + masks (upsampled, sigmoid) for the largest K
    detector_ms: float
    mask_share: float  # mask-head time / total at the largest K

    def median(self, k: int) -> float:
        return next(r.median_ms for r in self.rows if r.k == k)

    def ratio(self, k_hi: int, k_lo: int) -> float:
        return self.median(k_hi) / self.median(k_lo)


def _time(fn, repeats: int, min_sample_s: float = 2e-3) -> tuple[np.ndarray, int]:
    """Per-call seconds for ``repeats`` samples, batching calls until one sample clears the timer floor."""
    fn()
    inner = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        if time.perf_counter() - t0 >= min_sample_s or inner >= 1 << 16:
            break
        inner *= 2
    samples = np.empty(repeats)
    for r in range(repeats):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        samples[r] = (time.perf_counter() - t0) / inner
    return samples, inner


def bench_mask_head(model: CondInst, bottom: torch.Tensor | None = None, k_values=(1, 10, 100),
                    repeats: int = 30, image_size: tuple[int, int] = (64, 64), seed: int = 0,
                    dtype: torch.dtype = torch.float32) -> TimingReport:
    """Median wall-clock of unpacking and applying K dynamic mask heads, single-threaded.

    The per-K rows cover coordinate construction, unpacking and the head
    itself.  Upsampling and the sigmoid are post-processing; they count
    toward the total inference time but not the mask-head share.
    """
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        m = copy.deepcopy(model).to(dtype).eval()
        gen = torch.Generator().manual_seed(seed)
        image = torch.rand(1, 3, *image_size, generator=gen, dtype=dtype)
        with torch.no_grad():
            if bottom is None:
                bottom = m(image).bottom
            bottom = bottom.to(dtype)
        n = m.cfg.num_filter_params
        hb, wb = bottom.shape[-2:]
        rows, post_ms = [], {}
        for k in k_values:
            if k == 0:
                rows.append(TimingRow(0, 0.0, 0.0, 0.0, 0, 0))
                continue
            thetas = torch.randn(k, n, generator=gen, dtype=dtype) * 0.1
            pts = torch.rand(k, 2, generator=gen, dtype=torch.float64) * torch.tensor([image_size[1], image_size[0]])
            idx = torch.zeros(k, dtype=torch.long)

            def run():
                with torch.no_grad():
                    m.mask_logits(bottom, idx, pts, thetas, upsampled=False)

            samples, inner = _time(run, repeats)
            with torch.no_grad():
                raw = m.mask_logits(bottom, idx, pts, thetas, upsampled=False)

            def post():
                torch.sigmoid(upsample(raw, m.cfg.upsample_factor))

            post_ms[k] = float(np.median(_time(post, max(5, repeats // 3))[0]) * 1e3)
            ms = samples * 1e3
            rows.append(TimingRow(k, float(np.median(ms)), float(np.percentile(ms, 10)),
                                  float(np.percentile(ms, 90)), repeats, inner))

        def detector():
            with torch.no_grad():
                m(image)

        det_samples, _ = _time(detector, max(5, repeats // 3))
        det_ms = float(np.median(det_samples) * 1e3)
        top = max(rows, key=lambda r: r.k)
        mask_ms = top.median_ms
        total = det_ms + mask_ms + post_ms.get(top.k, 0.0)
        return TimingReport(rows, total, det_ms, mask_ms / total if total else 0.0)
    finally:
        torch.set_num_threads(threads)
