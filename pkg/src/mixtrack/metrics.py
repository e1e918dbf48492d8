"""Box overlap and the success-curve metric.

Success uses the strict convention: a frame counts at threshold t iff
IoU > t, over the fixed 21-point grid 0.00, 0.05, ..., 1.00. The
summary score is the mean success rate over that grid, so a perfect
tracker scores 20/21 (the IoU = 1 frame fails the strict test at
t = 1.00).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

THRESHOLDS = tuple(np.round(np.arange(21) * 0.05, 2))


def to_corners(box):
    cx, cy, w, h = box
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def iou(box_a, box_b):
    """Intersection over union of two [cx, cy, w, h] boxes."""
    ax1, ay1, ax2, ay2 = to_corners(box_a)
    bx1, by1, bx2, by2 = to_corners(box_b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def center_distance(box_a, box_b):
    return float(np.hypot(box_a[0] - box_b[0], box_a[1] - box_b[1]))


@dataclass
class SuccessCurve:
    ious: tuple
    thresholds: tuple
    rates: tuple
    suc: float

    @property
    def n_frames(self):
        return len(self.ious)


def suc(ious):
    """Success curve over the fixed threshold grid; SUC is its mean."""
    ious = [float(v) for v in ious]
    if not ious:
        raise ValueError("suc: empty IoU list")
    for v in ious:
        if not (0.0 <= v <= 1.0):
            raise ValueError(f"suc: IoU {v} outside [0, 1]")
    arr = np.asarray(ious)
    rates = tuple(float(np.mean(arr > t)) for t in THRESHOLDS)
    return SuccessCurve(ious=tuple(ious), thresholds=THRESHOLDS, rates=rates, suc=float(np.mean(rates)))
