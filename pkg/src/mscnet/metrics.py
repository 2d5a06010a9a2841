"""Binary change-detection metrics from pixel confusion counts."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict

import numpy as np

from .errors import DataError
from .formats import encode_pnm

METRIC_NAMES = ("precision", "recall", "f1", "iou", "kappa")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


def _as_binary(x, what: str) -> np.ndarray:
    arr = np.asarray(getattr(x, "data", x))
    if arr.dtype == np.bool_:
        return arr
    if not np.all((arr == 0) | (arr == 1)):
        raise DataError(f"{what} must be binary (0/1)")
    return arr.astype(bool)


def confusion(pred_bin, label) -> ConfusionCounts:
    p = _as_binary(pred_bin, "prediction")
    y = _as_binary(label, "label")
    if p.shape != y.shape:
        raise DataError(f"prediction shape {p.shape} differs from label shape {y.shape}")
    tp = int(np.count_nonzero(p & y))
    fp = int(np.count_nonzero(p & ~y))
    fn = int(np.count_nonzero(~p & y))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def _ratio(num: int, den: int, empty_agrees: bool) -> float:
    if den == 0:
        return 1.0 if empty_agrees else 0.0
    return num / den


def compute_metrics(c: ConfusionCounts) -> Dict[str, float]:
    """Precision, recall, F1, IoU and Cohen's kappa (fractions, not percent).

    A zero denominator yields 1 when prediction and label agree that the
    positive set is empty and 0 otherwise.
    """
    pred_empty = c.tp + c.fp == 0
    label_empty = c.tp + c.fn == 0
    agree = pred_empty and label_empty
    precision = _ratio(c.tp, c.tp + c.fp, agree)
    recall = _ratio(c.tp, c.tp + c.fn, agree)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    iou = _ratio(c.tp, c.tp + c.fp + c.fn, agree)
    t = c.total
    if t == 0:
        kappa = 1.0
    else:
        po = (c.tp + c.tn) / t
        pe = ((c.tp + c.fp) * (c.tp + c.fn) + (c.fn + c.tn) * (c.fp + c.tn)) / (t * t)
        if pe == 1.0:
            kappa = 1.0 if po == 1.0 else 0.0
        else:
            kappa = (po - pe) / (1 - pe)
    return {"precision": precision, "recall": recall, "f1": f1, "iou": iou, "kappa": kappa}


def metrics_report(c: ConfusionCounts, samples: int) -> Dict[str, object]:
    """Percentages rounded to two decimals, as reported in result tables."""
    m = compute_metrics(c)
    report: Dict[str, object] = {k: round(100.0 * m[k], 2) for k in METRIC_NAMES}
    report["samples"] = samples
    report["averaging"] = "micro"
    return report


def report_json(report: Dict[str, object]) -> str:
    return json.dumps(report, sort_keys=False)


# TP white, FP red, TN black, FN blue
_COLORS = np.array([[0, 0, 0], [0, 0, 255], [255, 0, 0], [255, 255, 255]], dtype=np.uint8)


def render_diagnostic(pred_bin, label) -> np.ndarray:
    """Colour-code each pixel by outcome; returns an HxWx3 uint8 image."""
    p = _as_binary(pred_bin, "prediction")
    y = _as_binary(label, "label")
    if p.shape != y.shape:
        raise DataError(f"prediction shape {p.shape} differs from label shape {y.shape}")
    p, y = np.squeeze(p), np.squeeze(y)
    if p.ndim != 2:
        raise DataError(f"diagnostic rendering needs 2-D maps, got {p.shape}")
    return _COLORS[2 * p.astype(np.intp) + y.astype(np.intp)]


def render_diagnostic_ppm(pred_bin, label) -> bytes:
    return encode_pnm(render_diagnostic(pred_bin, label))
