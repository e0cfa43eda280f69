"""Training losses: focal, GIoU, center-ness BCE, Dice mask loss, semantic CE and the weighted total."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

DICE_EPS = 1e-6
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
MASK_WEIGHT = 1.0
PANOPTIC_WEIGHT = 0.5
AUX_SEMANTIC_WEIGHT = 0.5


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, value: float):
        self.component = component
        super().__init__(f"loss component {component!r} is not finite ({value})")


def dice_loss(pred: torch.Tensor, gt: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """``1 - (2 sum(p g) + eps) / (sum(p^2) + sum(g^2) + eps)`` over all trailing dims.

    A leading batch dimension is kept when inputs are 2-D or more; 1-D inputs give a scalar.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"dice_loss size mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if pred.dim() <= 1:
        pred, gt = pred.reshape(1, -1), gt.reshape(1, -1)
        squeeze = True
    else:
        pred, gt = pred.reshape(pred.shape[0], -1), gt.reshape(gt.shape[0], -1)
        squeeze = False
    inter = (pred * gt).sum(1)
    denom = (pred * pred).sum(1) + (gt * gt).sum(1)
    loss = 1.0 - (2.0 * inter + eps) / (denom + eps)
    return loss[0] if squeeze else loss


def mask_loss(pred: torch.Tensor, gt: torch.Tensor, num_pos: int) -> tuple[torch.Tensor, bool]:
    """Sum of per-location Dice losses over sampled positives divided by ALL positives.

    Returns ``(loss, empty)``; ``empty`` is set when the image has no positives.
    """
    if num_pos == 0 or pred.shape[0] == 0:
        return pred.sum() * 0.0, num_pos == 0
    return dice_loss(pred, gt).sum() / num_pos, False


def focal_loss(logits: torch.Tensor, labels: torch.Tensor, num_pos: int | float | None = None,
               alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> torch.Tensor:
    """Sigmoid focal loss summed over locations and classes.

    ``logits`` is (L, C); ``labels`` (L,) holds class ids with 0 = background.
    The sum is divided by ``max(num_pos, 1)``.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    target = torch.zeros_like(logits)
    pos = labels > 0
    target[pos.nonzero(as_tuple=True)[0], labels[pos] - 1] = 1.0
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, target, reduction="none")
    p_t = p * target + (1 - p) * (1 - target)
    alpha_t = alpha * target + (1 - alpha) * (1 - target)
    loss = alpha_t * (1 - p_t) ** gamma * ce
    if num_pos is None:
        num_pos = int(pos.sum())
    return loss.sum() / max(float(num_pos), 1.0)


def giou(box_a, box_b) -> torch.Tensor:
    """Generalised IoU of (..., 4) boxes ``(x1, y1, x2, y2)``."""
    a = torch.as_tensor(box_a, dtype=torch.float64)
    b = torch.as_tensor(box_b, dtype=torch.float64)
    iw = (torch.minimum(a[..., 2], b[..., 2]) - torch.maximum(a[..., 0], b[..., 0])).clamp(min=0)
    ih = (torch.minimum(a[..., 3], b[..., 3]) - torch.maximum(a[..., 1], b[..., 1])).clamp(min=0)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    ew = torch.maximum(a[..., 2], b[..., 2]) - torch.minimum(a[..., 0], b[..., 0])
    eh = torch.maximum(a[..., 3], b[..., 3]) - torch.minimum(a[..., 1], b[..., 1])
    enclose = ew * eh
    return inter / union - (enclose - union) / enclose


def giou_loss(pred: torch.Tensor, target: torch.Tensor, weight: torch.Tensor | None = None) -> torch.Tensor:
    """``1 - GIoU`` for (P, 4) l, t, r, b distances sharing one anchor point.

    Weighted by ``weight`` (center-ness targets) and normalised by its sum.
    """
    if pred.shape[0] == 0:
        return pred.sum() * 0.0
    if (pred < 0).any():
        raise ValueError("predicted box distances must be non-negative")
    pl, pt, pr, pb = pred.unbind(-1)
    tl, tt, tr, tb = target.unbind(-1)
    pred_area = (pl + pr) * (pt + pb)
    target_area = (tl + tr) * (tt + tb)
    inter = (torch.minimum(pl, tl) + torch.minimum(pr, tr)) * (torch.minimum(pt, tt) + torch.minimum(pb, tb))
    union = pred_area + target_area - inter
    enclose = (torch.maximum(pl, tl) + torch.maximum(pr, tr)) * (torch.maximum(pt, tt) + torch.maximum(pb, tb))
    g = inter / union - (enclose - union) / enclose
    losses = 1.0 - g
    if weight is None:
        return losses.mean()
    return (losses * weight).sum() / weight.sum().clamp(min=1e-12)


def centerness_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    if logits.numel() == 0:
        return logits.sum() * 0.0
    return F.binary_cross_entropy_with_logits(logits, targets, reduction="mean")


def semantic_ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel cross-entropy; ``logits`` (B, L, H, W), ``labels`` (B, H, W)."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    n = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"semantic label outside [0, {n})")
    return F.cross_entropy(logits, labels, reduction="mean")


@dataclass
class LossBreakdown:
    l_cls: torch.Tensor
    l_box: torch.Tensor
    l_ctr: torch.Tensor
    l_mask: torch.Tensor
    total: torch.Tensor
    num_pos: int = 0
    l_pano: torch.Tensor | None = None
    l_aux_sem: torch.Tensor | None = None

    def as_row(self) -> dict[str, float]:
        row = {}
        for f in fields(self):
            v = getattr(self, f.name)
            row[f.name] = float("nan") if v is None else float(v.detach() if torch.is_tensor(v) else v)
        return row


def total_loss(l_cls, l_box, l_ctr, l_mask, l_pano=None, l_aux_sem=None, num_pos: int = 0,
               lam: float = MASK_WEIGHT, mu: float = PANOPTIC_WEIGHT,
               aux_weight: float = AUX_SEMANTIC_WEIGHT) -> LossBreakdown:
    parts = {"l_cls": l_cls, "l_box": l_box, "l_ctr": l_ctr, "l_mask": l_mask,
             "l_pano": l_pano, "l_aux_sem": l_aux_sem}
    parts = {k: (torch.as_tensor(v, dtype=torch.float64) if v is not None else None) for k, v in parts.items()}
    for name, v in parts.items():
        if v is not None and not math.isfinite(float(v.detach())):
            raise NonFiniteLossError(name, float(v.detach()))
    total = parts["l_cls"] + parts["l_box"] + parts["l_ctr"] + lam * parts["l_mask"]
    if parts["l_pano"] is not None:
        total = total + mu * parts["l_pano"]
    if parts["l_aux_sem"] is not None:
        total = total + aux_weight * parts["l_aux_sem"]
    return LossBreakdown(total=total, num_pos=num_pos, **parts)
