"""Segmentation and panoptic metrics.

IoU over an empty union is defined as 1.0 so absent classes do not poison
averages.  Panoptic matching follows the standard definition: segments
match when IoU > 0.5 (such matches are unique), SQ is the mean IoU of the
matches, RQ = TP / (TP + FP/2 + FN/2), PQ = SQ * RQ.  Two empty maps score
a perfect 1.0 on all three.
"""

from __future__ import annotations

import numpy as np

from .heads import PanopticScores


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    if pred.shape != gt.shape:
        raise ValueError(f"iou: shape mismatch {pred.shape} vs {gt.shape}")
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def segment_sets(ids: np.ndarray) -> dict[int, np.ndarray]:
    return {int(i): ids == i for i in np.unique(ids) if i != 0}


def panoptic_quality(pred_ids: np.ndarray, gt_ids: np.ndarray) -> PanopticScores:
    if pred_ids.shape != gt_ids.shape:
        raise ValueError(
            f"panoptic_quality: shape mismatch {pred_ids.shape} vs {gt_ids.shape}")
    preds = segment_sets(pred_ids)
    gts = segment_sets(gt_ids)
    matches: list[float] = []
    matched_pred: set[int] = set()
    matched_gt: set[int] = set()
    for gid, gmask in gts.items():
        overlapping = np.unique(pred_ids[gmask])
        for pid in overlapping:
            pid = int(pid)
            if pid == 0 or pid in matched_pred:
                continue
            val = iou(preds[pid], gmask)
            if val > 0.5:
                matches.append(val)
                matched_pred.add(pid)
                matched_gt.add(gid)
                break   # IoU > 0.5 matches are unique per segment
    tp = len(matches)
    fp = len(preds) - len(matched_pred)
    fn = len(gts) - len(matched_gt)
    if tp == 0 and fp == 0 and fn == 0:
        return PanopticScores(1.0, 1.0, 1.0, 0, 0, 0)
    sq = float(np.mean(matches)) if matches else 0.0
    rq = tp / (tp + 0.5 * fp + 0.5 * fn)
    return PanopticScores(sq * rq, sq, rq, tp, fp, fn)
