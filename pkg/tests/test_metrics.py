import math
from types import SimpleNamespace

import numpy as np
import pytest

from bayesbeat.errors import DataError
from bayesbeat.metrics import (
    SWEEP_COLUMNS,
    ConfusionCounts,
    compute_counts,
    compute_metrics,
    roc_auc,
    sweep_csv,
    threshold_sweep,
)


def brute_metrics(tp, tn, fp, fn):
    """Expand the table into label arrays and tally in plain 64-bit floats."""
    y = [1] * tp + [0] * tn + [0] * fp + [1] * fn
    p = [1] * tp + [0] * tn + [1] * fp + [0] * fn
    TP = sum(1.0 for a, b in zip(y, p) if a == 1 and b == 1)
    TN = sum(1.0 for a, b in zip(y, p) if a == 0 and b == 0)
    FP = sum(1.0 for a, b in zip(y, p) if a == 0 and b == 1)
    FN = sum(1.0 for a, b in zip(y, p) if a == 1 and b == 0)
    div = lambda a, b: a / b if b else 0.0  # noqa: E731
    rec = div(TP, TP + FN)
    prec = div(TP, TP + FP)
    return {
        "sensitivity": rec,
        "specificity": div(TN, TN + FP),
        "precision": prec,
        "f1": div(2 * prec * rec, prec + rec),
        "mcc": div(TP * TN - FP * FN, math.sqrt((TP + FP) * (TP + FN) * (TN + FP) * (TN + FN))),
    }


def wilcoxon(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
    return wins / (len(pos) * len(neg))


def test_hand_example():
    r = compute_metrics(ConfusionCounts(tp=7, tn=5, fp=2, fn=1))
    assert r.precision == pytest.approx(7 / 9, abs=1e-12)
    assert r.sensitivity == pytest.approx(0.875, abs=1e-12)
    assert r.f1 == pytest.approx(0.823529411764706, abs=1e-12)
    assert r.mcc == pytest.approx(33 / math.sqrt(9 * 8 * 7 * 6), abs=1e-12)
    # 33 / sqrt(3024) evaluated independently
    assert r.mcc == pytest.approx(0.600099198, abs=1e-9)


def test_counts_perfect_and_all_positive():
    y = np.array([1] * 10 + [0] * 10)
    c = compute_counts(y, y)
    assert c.fp == 0 and c.fn == 0
    c = compute_counts(np.ones(20, dtype=int), y)
    assert (c.tp, c.fp, c.tn, c.fn) == (10, 10, 0, 0)


def test_counts_match_tally():
    rng = np.random.default_rng(0)
    p, y = rng.integers(0, 2, 50), rng.integers(0, 2, 50)
    c = compute_counts(p, y)
    tally = {"tp": 0, "tn": 0, "fp": 0, "fn": 0}
    for a, b in zip(p, y):
        tally[("t" if a == b else "f") + ("p" if a == 1 else "n")] += 1
    assert (c.tp, c.tn, c.fp, c.fn) == (tally["tp"], tally["tn"], tally["fp"], tally["fn"])


def test_counts_errors():
    with pytest.raises(DataError, match="length mismatch"):
        compute_counts([0, 1], [0])
    with pytest.raises(DataError):
        compute_counts([0, 2], [0, 1])
    with pytest.raises(DataError, match="empty"):
        compute_metrics(ConfusionCounts())


def test_random_tables_against_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(100):
        tp, tn, fp, fn = (int(v) for v in rng.integers(0, 40, 4))
        if tp + tn + fp + fn == 0:
            tn = 1
        r = compute_metrics(ConfusionCounts(tp, tn, fp, fn))
        for name, value in brute_metrics(tp, tn, fp, fn).items():
            assert abs(getattr(r, name) - value) <= 1e-9, name


def test_auc_equals_wilcoxon():
    rng = np.random.default_rng(2)
    for trial in range(30):
        n = int(rng.integers(2, 201))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        # coarse scores force plenty of ties
        s = np.round(rng.random(n) + 0.3 * y, 1 if trial % 2 else 3)
        assert abs(roc_auc(s, y) - wilcoxon(s, y)) <= 1e-9


def test_auc_edge_cases():
    y = np.array([0, 1, 0, 1, 1])
    assert roc_auc(np.full(5, 0.3), y) == 0.5
    assert roc_auc(y * 0.9 + 0.05, y) == 1.0
    assert roc_auc([0.2, 0.4], [1, 1]) is None


def test_zero_denominator_flags():
    r = compute_metrics(ConfusionCounts(tp=0, tn=5, fp=0, fn=0))
    assert r.sensitivity == 0 and r.precision == 0 and r.mcc == 0
    assert {"sensitivity", "precision", "f1", "mcc", "auc"} <= set(r.undefined)
    assert "specificity" not in r.undefined


def test_f1_is_harmonic_mean_and_mcc_symmetry():
    rng = np.random.default_rng(3)
    for _ in range(50):
        tp, tn, fp, fn = (int(v) for v in rng.integers(1, 30, 4))
        r = compute_metrics(ConfusionCounts(tp, tn, fp, fn))
        assert abs(r.f1 - 2 * r.precision * r.sensitivity / (r.precision + r.sensitivity)) <= 1e-9
        swapped = compute_metrics(ConfusionCounts(tp=tn, tn=tp, fp=fn, fn=fp))
        assert abs(abs(r.mcc) - abs(swapped.mcc)) <= 1e-12


def _preds(u, labels, p_af):
    return [SimpleNamespace(u_scalar=a, label=b, p_af=c) for a, b, c in zip(u, labels, p_af)]


def test_threshold_sweep():
    rng = np.random.default_rng(4)
    y = rng.integers(0, 2, 60)
    p_af = np.clip(y * 0.6 + rng.normal(0.2, 0.2, 60), 0, 1)
    preds = _preds(rng.uniform(0, 0.25, 60), (p_af > 0.5).astype(int), p_af)
    reports = threshold_sweep(preds, y, [None, math.inf, 0.1, 0.0])
    assert len(reports) == 4
    assert reports[0].as_dict() | {"threshold": 0} == reports[1].as_dict() | {"threshold": 0}
    assert reports[3].empty and reports[3].abstention_rate == 1.0
    keep = np.array([p.u_scalar <= 0.1 for p in preds])
    assert reports[2].counts.total == keep.sum()
    assert reports[2].abstention_rate == pytest.approx(1 - keep.mean())
    with pytest.raises(DataError, match="descending"):
        threshold_sweep(preds, y, [0.01, 0.05])
    text = sweep_csv(reports)
    assert text.splitlines()[0].split(",") == list(SWEEP_COLUMNS)
    assert len(text.splitlines()) == 5
