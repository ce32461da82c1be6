"""Confusion counts, the six evaluation metrics and uncertainty-threshold sweeps.

Positive class is AF (label 1). A metric whose denominator is zero is reported
as 0 and its name is listed in :attr:`MetricsReport.undefined`.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics import auc as _trapezoid_area
from sklearn.metrics import roc_curve

from .errors import DataError

METRIC_NAMES = ("sensitivity", "specificity", "precision", "f1", "auc", "mcc")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        for name in ("tp", "tn", "fp", "fn"):
            if getattr(self, name) < 0:
                raise DataError(f"confusion count {name} must be >= 0")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass
class MetricsReport:
    sensitivity: float
    specificity: float
    precision: float
    f1: float
    auc: float
    mcc: float
    counts: ConfusionCounts
    threshold: Optional[float] = None
    abstention_rate: float = 0.0
    undefined: Tuple[str, ...] = ()
    empty: bool = False

    def as_dict(self) -> Dict[str, object]:
        d = asdict(self)
        d["counts"] = asdict(self.counts)
        d["undefined"] = list(self.undefined)
        return d

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)


def _binary(values, what: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise DataError(f"{what} must be one-dimensional")
    if arr.size and not np.all((arr == 0) | (arr == 1)):
        raise DataError(f"{what} must contain only 0 and 1")
    return arr.astype(np.int64)


def compute_counts(predictions, labels) -> ConfusionCounts:
    pred = _binary(predictions, "predictions")
    true = _binary(labels, "labels")
    if pred.shape != true.shape:
        raise DataError(f"length mismatch: {pred.size} predictions vs {true.size} labels")
    return ConfusionCounts(
        tp=int(np.sum((pred == 1) & (true == 1))),
        tn=int(np.sum((pred == 0) & (true == 0))),
        fp=int(np.sum((pred == 1) & (true == 0))),
        fn=int(np.sum((pred == 0) & (true == 1))),
    )


def roc_auc(scores, labels) -> Optional[float]:
    """Area under the ROC curve over all distinct score thresholds.

    Returns ``None`` when only one class is present.
    """
    y = _binary(labels, "labels")
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != y.shape:
        raise DataError(f"length mismatch: {s.size} scores vs {y.size} labels")
    if y.size == 0 or y.min() == y.max():
        return None
    fpr, tpr, _ = roc_curve(y, s, drop_intermediate=False)
    return float(_trapezoid_area(fpr, tpr))


def _ratio(num: float, den: float, name: str, undefined: List[str]) -> float:
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def compute_metrics(counts: ConfusionCounts, scores=None, labels=None, threshold: Optional[float] = None,
                    abstention_rate: float = 0.0) -> MetricsReport:
    """Six metrics from ``counts``; AUC from ``scores`` (p_af) and ``labels`` when given."""
    if counts.total == 0:
        raise DataError("cannot compute metrics on an empty set")
    tp, tn, fp, fn = (float(v) for v in (counts.tp, counts.tn, counts.fp, counts.fn))
    undefined: List[str] = []
    sens = _ratio(tp, tp + fn, "sensitivity", undefined)
    spec = _ratio(tn, tn + fp, "specificity", undefined)
    prec = _ratio(tp, tp + fp, "precision", undefined)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn, "f1", undefined)
    mcc = _ratio(tp * tn - fp * fn, math.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)), "mcc", undefined)
    area = None if scores is None else roc_auc(scores, labels)
    if area is None:
        undefined.append("auc")
        area = 0.0
    return MetricsReport(sens, spec, prec, f1, area, mcc, counts, threshold, abstention_rate, tuple(undefined))


def empty_report(threshold: Optional[float]) -> MetricsReport:
    return MetricsReport(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, ConfusionCounts(), threshold, 1.0, METRIC_NAMES, True)


def evaluate(labels_pred, p_af, labels, threshold: Optional[float] = None,
             abstention_rate: float = 0.0) -> MetricsReport:
    return compute_metrics(compute_counts(labels_pred, labels), p_af, labels, threshold, abstention_rate)


def threshold_sweep(predictions: Sequence, labels, thresholds: Sequence[Optional[float]]) -> List[MetricsReport]:
    """One report per threshold over the predictions it accepts (``u_scalar <= t``).

    ``predictions`` are objects with ``label``, ``p_af`` and ``u_scalar``
    attributes; ``None`` in ``thresholds`` means no filtering and sorts first.
    """
    keys = [math.inf if t is None else float(t) for t in thresholds]
    if any(k < 0 for k in keys):
        raise DataError("thresholds must be non-negative")
    if any(a < b for a, b in zip(keys, keys[1:])):
        raise DataError("thresholds must be sorted in descending order")
    y = _binary(labels, "labels")
    if len(predictions) != y.size:
        raise DataError(f"length mismatch: {len(predictions)} predictions vs {y.size} labels")
    pred = np.array([p.label for p in predictions], dtype=np.int64)
    p_af = np.array([p.p_af for p in predictions], dtype=np.float64)
    u = np.array([p.u_scalar for p in predictions], dtype=np.float64)
    reports = []
    for t, k in zip(thresholds, keys):
        keep = u <= k
        rate = 1.0 - keep.mean() if y.size else 0.0
        if not keep.any():
            reports.append(empty_report(t))
            continue
        reports.append(evaluate(pred[keep], p_af[keep], y[keep], t, float(rate)))
    return reports


SWEEP_COLUMNS = ("threshold", "abstention_rate") + METRIC_NAMES


def sweep_csv(reports: Sequence[MetricsReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for r in reports:
        writer.writerow(["none" if r.threshold is None else repr(r.threshold), repr(r.abstention_rate)]
                        + [repr(getattr(r, m)) for m in METRIC_NAMES])
    return buf.getvalue()


def sweep_json(reports: Sequence[MetricsReport]) -> str:
    return json.dumps([r.as_dict() for r in reports], indent=2, sort_keys=True) + "\n"
