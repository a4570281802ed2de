"""Pixel-wise overlap and distance metrics: REC, PRE, DICE, AVD, VS.

Definitions follow Taha & Hanbury's evaluation tool:

* DICE = 2TP / (2TP + FP + FN)
* VS   = 1 - |FP - FN| / (2TP + FP + FN)
* AVD  = max(d(A, B), d(B, A)), with d(A, B) the mean over foreground pixels
  of A of the Euclidean distance to the nearest foreground pixel of B.

A zero denominator means both relevant sets are empty: the score is 1.0 when
the masks agree there and 0.0 otherwise.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import math

import numpy as np

from .errors import DataError, UndefinedMetricError

METRIC_KEYS = ("rec", "pre", "dice", "avd", "vs")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _check_masks(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise DataError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    for name, m in (("pred", pred), ("gt", gt)):
        if not np.isin(m, (0, 1)).all():
            raise DataError(f"{name} mask is not binary")
    return pred.astype(bool), gt.astype(bool)


def confusion(pred, gt) -> ConfusionCounts:
    p, g = _check_masks(pred, gt)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def _ratio(num: int, den: int, agree: bool) -> float:
    if den == 0:
        return 1.0 if agree else 0.0
    return num / den


def dice(c: ConfusionCounts) -> float:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, c.fp == c.fn == 0)


def precision(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp, c.fn == 0)


def recall(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn, c.fp == 0)


def volumetric_similarity(c: ConfusionCounts) -> float:
    den = 2 * c.tp + c.fp + c.fn
    if den == 0:
        return 1.0
    return 1.0 - abs(c.fp - c.fn) / den


def _directed(a: np.ndarray, b: np.ndarray, chunk: int = 2048) -> float:
    """Mean over points of ``a`` of the distance to the closest point of ``b``."""
    nearest = np.empty(len(a))
    for start in range(0, len(a), chunk):
        block = a[start:start + chunk]
        d2 = ((block[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        nearest[start:start + chunk] = np.sqrt(d2.min(axis=1))
    # fsum is correctly rounded, so the result does not depend on summation order
    return math.fsum(nearest.tolist()) / len(nearest)


def averaged_hausdorff(a, b, spacing: float = 1.0) -> float:
    """AVD between two binary masks, in pixels times ``spacing``.

    Raises UndefinedMetricError when either mask has no foreground.
    """
    pa, pb = _check_masks(a, b)
    ca = np.argwhere(pa).astype(np.int64)
    cb = np.argwhere(pb).astype(np.int64)
    if len(ca) == 0 or len(cb) == 0:
        raise UndefinedMetricError("averaged Hausdorff distance needs two non-empty masks")
    return max(_directed(ca, cb), _directed(cb, ca)) * spacing


def image_metrics(pred, gt, spacing: float = 1.0) -> Dict[str, float]:
    """All five metrics for one image; ``avd`` is None when undefined."""
    c = confusion(pred, gt)
    try:
        avd = averaged_hausdorff(pred, gt, spacing)
    except UndefinedMetricError:
        avd = None
    return {
        "rec": recall(c),
        "pre": precision(c),
        "dice": dice(c),
        "avd": avd,
        "vs": volumetric_similarity(c),
    }


@dataclass
class MetricReport:
    """Per-image values and population mean/std for each metric."""

    per_image: Dict[str, List] = field(default_factory=lambda: {k: [] for k in METRIC_KEYS})

    def summary(self, key: str) -> Dict:
        values = [v for v in self.per_image[key] if v is not None]
        n_undefined = len(self.per_image[key]) - len(values)
        if values:
            mean, std = float(np.mean(values)), float(np.std(values))
        else:
            mean = std = None
        return {"mean": mean, "std": std, "n": len(values), "n_undefined": n_undefined}

    def mean(self, key: str) -> float:
        return self.summary(key)["mean"]

    def to_dict(self) -> Dict:
        return {k: self.summary(k) for k in METRIC_KEYS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def evaluate_dataset(pred_masks: Sequence, gt_masks: Sequence, spacing: float = 1.0) -> MetricReport:
    if len(pred_masks) != len(gt_masks):
        raise DataError(f"{len(pred_masks)} predictions for {len(gt_masks)} ground truths")
    report = MetricReport()
    for pred, gt in zip(pred_masks, gt_masks):
        for k, v in image_metrics(pred, gt, spacing).items():
            report.per_image[k].append(v)
    n_missing = sum(v is None for v in report.per_image["avd"])
    if n_missing:
        warnings.warn(f"AVD undefined for {n_missing} image(s) with an empty mask; excluded")
    return report
