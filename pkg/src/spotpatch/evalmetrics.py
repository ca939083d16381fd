"""Detection evaluation: IoU, greedy matching, all-points AP and mAP@0.5."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .exceptions import ArgumentError


@dataclass(frozen=True)
class Box:
    xmin: float
    ymin: float
    xmax: float
    ymax: float
    cls: int = 0
    score: Optional[float] = None
    image_id: int = 0

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ArgumentError(f"degenerate box ({self.xmin}, {self.ymin}, {self.xmax}, {self.ymax})")

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)

    def to_list(self) -> list:
        return [self.xmin, self.ymin, self.xmax, self.ymax]


def iou(a: Box, b: Box) -> float:
    iw = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    ih = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def match_detections(preds: Sequence[Box], gts: Sequence[Box], iou_thresh: float = 0.5):
    """Greedy matching in descending score order (ties keep input order).

    Returns ``(order, is_tp)``: the prediction indices in processing order and
    for each whether it matched a previously unmatched ground truth box. Each
    prediction is matched to the unmatched gt of the same image with the
    highest IoU, provided that IoU is at least ``iou_thresh``.
    """
    order = sorted(range(len(preds)), key=lambda k: -(preds[k].score or 0.0))
    by_image = defaultdict(list)
    for j, g in enumerate(gts):
        by_image[g.image_id].append(j)
    used = set()
    is_tp = []
    for k in order:
        p = preds[k]
        best, best_iou = None, iou_thresh
        for j in by_image.get(p.image_id, ()):
            if j in used:
                continue
            v = iou(p, gts[j])
            if v >= best_iou and (best is None or v > best_iou):
                best, best_iou = j, v
        if best is not None:
            used.add(best)
        is_tp.append(best is not None)
    return order, is_tp


def ap_from_matches(is_tp: Sequence[bool], n_gt: int) -> float:
    """Area under the precision envelope (all-points interpolation)."""
    if n_gt == 0:
        return 0.0
    tp = np.cumsum(np.asarray(is_tp, dtype=np.float64))
    fp = np.cumsum(~np.asarray(is_tp, dtype=bool))
    if tp.size == 0:
        return 0.0
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1e-300)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def average_precision(preds: Sequence[Box], gts: Sequence[Box], iou_thresh: float = 0.5) -> float:
    """AP of single-class predictions against ground truth."""
    _, is_tp = match_detections(preds, gts, iou_thresh)
    return ap_from_matches(is_tp, len(gts))


@dataclass
class APResult:
    per_class: Dict[int, float]
    mAP: float

    def to_dict(self) -> dict:
        return {"per_class": {str(k): v for k, v in sorted(self.per_class.items())}, "mAP": self.mAP}


def map_at_50(preds: Iterable[Box], gts: Iterable[Box], iou_thresh: float = 0.5) -> APResult:
    """Mean AP over the classes that have at least one ground-truth box."""
    pred_by, gt_by = defaultdict(list), defaultdict(list)
    for p in preds:
        pred_by[p.cls].append(p)
    for g in gts:
        gt_by[g.cls].append(g)
    if not gt_by:
        raise ArgumentError("map_at_50 needs at least one ground-truth box")
    per_class = {c: average_precision(pred_by.get(c, []), gt_by[c], iou_thresh) for c in sorted(gt_by)}
    return APResult(per_class, float(np.mean(list(per_class.values()))))
