"""Instance-matching metrics: AP over IoU thresholds and panoptic quality.

Conventions (pinned for determinism): matching is greedy by descending
IoU with a one-to-one constraint and candidate pairs require IoU strictly
above the threshold; AP(tau) = TP/(TP+FP+FN) per image, averaged over the
dataset; an image empty in both masks scores AP = 1; the multi-class PQ
mean excludes classes absent from both masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation

AP_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.901, 0.05), 2))


@dataclass
class MatchReport:
    tau: float
    tp: int
    fp: int
    fn: int
    sum_matched_iou: float

    @property
    def ap(self) -> float:
        denom = self.tp + self.fp + self.fn
        return self.tp / denom if denom else 1.0

    @property
    def pq(self) -> float:
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.sum_matched_iou / denom if denom else 1.0


def instance_iou_pairs(gt: np.ndarray, pred: np.ndarray):
    """Sparse IoU between overlapping (gt id, pred id) instance pairs.

    Returns (pairs, ious, n_gt, n_pred) where pairs is (M, 2) of positive
    ids with nonzero intersection.
    """
    if gt.shape != pred.shape:
        raise ContractViolation("mask dims differ")
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    gt_ids, gt_areas = np.unique(gt[gt > 0], return_counts=True)
    pr_ids, pr_areas = np.unique(pred[pred > 0], return_counts=True)
    garea = dict(zip(gt_ids.tolist(), gt_areas.tolist()))
    parea = dict(zip(pr_ids.tolist(), pr_areas.tolist()))
    both = (gt > 0) & (pred > 0)
    if both.any():
        combo = gt[both].astype(np.int64) * (1 << 32) + pred[both].astype(np.int64)
        uniq, counts = np.unique(combo, return_counts=True)
        pairs = np.stack([uniq >> 32, uniq & 0xFFFFFFFF], axis=1)
        inter = counts.astype(np.float64)
        union = np.array([garea[int(a)] + parea[int(b)] for a, b in pairs],
                         dtype=np.float64) - inter
        ious = inter / union
    else:
        pairs = np.zeros((0, 2), dtype=np.int64)
        ious = np.zeros(0)
    return pairs, ious, len(gt_ids), len(pr_ids)


def match_instances(gt: np.ndarray, pred: np.ndarray, tau: float) -> MatchReport:
    """Greedy one-to-one matching of instances at IoU > tau."""
    if not 0.0 < tau < 1.0:
        raise ContractViolation("tau must lie in (0, 1)")
    pairs, ious, n_gt, n_pred = instance_iou_pairs(gt, pred)
    cand = ious > tau
    pairs, ious = pairs[cand], ious[cand]
    # deterministic order: IoU descending, then gt id, then pred id
    order = np.lexsort((pairs[:, 1], pairs[:, 0], -ious))
    used_gt: set[int] = set()
    used_pred: set[int] = set()
    tp = 0
    iou_sum = 0.0
    for i in order:
        a, b = int(pairs[i, 0]), int(pairs[i, 1])
        if a in used_gt or b in used_pred:
            continue
        used_gt.add(a)
        used_pred.add(b)
        tp += 1
        iou_sum += float(ious[i])
    return MatchReport(tau=tau, tp=tp, fp=n_pred - tp, fn=n_gt - tp,
                       sum_matched_iou=iou_sum)


def ap_curve(gt: np.ndarray, pred: np.ndarray) -> dict[float, float]:
    """Per-image AP at each threshold plus the mean under key 'mean'."""
    out = {}
    vals = []
    for tau in AP_THRESHOLDS:
        ap = match_instances(gt, pred, float(tau)).ap
        out[float(tau)] = ap
        vals.append(ap)
    out["mean"] = float(np.mean(vals))
    return out


def dataset_ap(gt_masks: list[np.ndarray],
               pred_masks: list[np.ndarray]) -> dict[float, float]:
    """Average the per-image AP curves over the dataset, in fixed order."""
    if len(gt_masks) != len(pred_masks):
        raise ContractViolation("gt/pred counts differ")
    acc: dict = {float(t): 0.0 for t in AP_THRESHOLDS}
    acc["mean"] = 0.0
    for g, p in zip(gt_masks, pred_masks):
        curve = ap_curve(g, p)
        for key in acc:
            acc[key] += curve[key]
    n = max(len(gt_masks), 1)
    return {key: v / n for key, v in acc.items()}


def panoptic_quality(gt: np.ndarray, pred: np.ndarray,
                     gt_classes: np.ndarray | None = None,
                     pred_classes: np.ndarray | None = None) -> dict:
    """bPQ, and mPQ with per-class PQ when class masks are given.

    Matching is at IoU > 0.5. Per-class PQ restricts both masks to one
    class; classes absent from both masks are excluded from the mPQ mean.
    """
    out = {"bPQ": match_instances(gt, pred, 0.5).pq}
    if gt_classes is None or pred_classes is None:
        return out
    classes = np.union1d(np.unique(gt_classes[gt_classes > 0]),
                         np.unique(pred_classes[pred_classes > 0]))
    per_class = {}
    for c in classes:
        gsel = np.where(gt_classes == c, gt, 0)
        psel = np.where(pred_classes == c, pred, 0)
        per_class[int(c)] = match_instances(gsel, psel, 0.5).pq
    out["per_class"] = per_class
    out["mPQ"] = float(np.mean(list(per_class.values()))) if per_class else 1.0
    return out
