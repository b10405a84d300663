"""Pixel agreement metrics for binary segmentation masks.

All three scores are computed from a single confusion tally so that Dice,
IoU and Cohen's kappa always describe the same comparison.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import check_mask_pair

FLAG_EMPTY_AGREEMENT = "empty_agreement"
FLAG_DEGENERATE_KAPPA = "degenerate_kappa"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class KappaBreakdown:
    p_o: float
    p_correct: float
    p_incorrect: float
    p_e: float
    kappa: float
    flags: tuple = field(default=())


def confusion(pred, gt) -> ConfusionCounts:
    """Tally TP/FP/TN/FN with foreground = 1."""
    pred, gt = check_mask_pair(pred, gt)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(pred.size - tp - fp - fn)
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def dice_with_flags(c: ConfusionCounts) -> tuple[float, tuple]:
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0, (FLAG_EMPTY_AGREEMENT,)
    return 2 * c.tp / denom, ()


def iou_with_flags(c: ConfusionCounts) -> tuple[float, tuple]:
    denom = c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0, (FLAG_EMPTY_AGREEMENT,)
    return c.tp / denom, ()


def dice(c: ConfusionCounts) -> float:
    """2TP / (2TP + FP + FN); 1.0 when both masks are empty."""
    return dice_with_flags(c)[0]


def iou(c: ConfusionCounts) -> float:
    """TP / (TP + FP + FN); 1.0 when both masks are empty."""
    return iou_with_flags(c)[0]


def kappa(c: ConfusionCounts) -> KappaBreakdown:
    """Cohen's kappa with the chance term split into its two class products.

    ``p_correct`` is the chance agreement on foreground and ``p_incorrect``
    the chance agreement on background. When chance agreement is 1 (both
    raters put every pixel in one class) kappa is reported as 0.0 and
    flagged.
    """
    total = c.total
    if total <= 0:
        raise ValueError("kappa needs at least one pixel")
    p_o = (c.tp + c.tn) / total
    p_correct = ((c.tp + c.fn) / total) * ((c.tp + c.fp) / total)
    p_incorrect = ((c.fp + c.tn) / total) * ((c.fn + c.tn) / total)
    p_e = p_correct + p_incorrect
    if p_e == 1.0:
        return KappaBreakdown(p_o, p_correct, p_incorrect, p_e, 0.0,
                              (FLAG_DEGENERATE_KAPPA,))
    return KappaBreakdown(p_o, p_correct, p_incorrect, p_e, (p_o - p_e) / (1.0 - p_e))


def score_masks(pred, gt) -> dict:
    """Dice, IoU and kappa for one mask pair, with any convention flags."""
    c = confusion(pred, gt)
    d, fd = dice_with_flags(c)
    j, fj = iou_with_flags(c)
    k = kappa(c)
    flags = sorted(set(fd) | set(fj) | set(k.flags))
    return {"dice": d, "iou": j, "kappa": k.kappa, "flags": flags,
            "tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn}


def pooled_scores(counts) -> dict:
    """Scores over the summed tally of many images (pixel pooling)."""
    counts = list(counts)
    c = ConfusionCounts(
        tp=sum(x.tp for x in counts), fp=sum(x.fp for x in counts),
        tn=sum(x.tn for x in counts), fn=sum(x.fn for x in counts),
    )
    return {"dice": dice(c), "iou": iou(c), "kappa": kappa(c).kappa}
