"""Evaluation metrics for state classification.

Five metrics cover the binary and multi-class report fields: balanced
accuracy, Cohen's kappa, weighted F1, AUROC, and the area under the
precision-recall curve.  Label-based metrics are computed in exact
rational arithmetic (final rounding happens once, at the return), so
tests can hold them to brute-force oracles without summation-order
slack.  AUC-PR uses step interpolation at each recall change rather
than the trapezoidal rule, which would be optimistically biased.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "MetricError",
    "auc_pr",
    "auroc",
    "balanced_accuracy",
    "cohens_kappa",
    "summarize",
    "weighted_f1",
]


class MetricError(ValueError):
    """Raised for empty, mismatched, or degenerate metric inputs."""


def _labels(y_true, y_pred) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(y_true).reshape(-1)
    p = np.asarray(y_pred).reshape(-1)
    if t.size == 0:
        raise MetricError("metric inputs are empty")
    if t.shape != p.shape:
        raise MetricError(f"length mismatch: {t.size} true vs {p.size} predicted")
    return t, p


def balanced_accuracy(y_true, y_pred) -> float:
    """Mean per-class recall over the classes present in ``y_true``."""
    t, p = _labels(y_true, y_pred)
    classes = sorted(set(t.tolist()))
    total = Fraction(0)
    for cls in classes:
        sel = t == cls
        total += Fraction(int(np.sum(p[sel] == cls)), int(np.sum(sel)))
    return float(total / len(classes))


def cohens_kappa(y_true, y_pred) -> float:
    """(p_o - p_e) / (1 - p_e) with marginal-product chance agreement.

    The degenerate case p_e = 1 (a single class on both sides) is
    defined as 0.
    """
    t, p = _labels(y_true, y_pred)
    classes = sorted(set(t.tolist()) | set(p.tolist()))
    n = t.size
    p_o = Fraction(int(np.sum(t == p)), n)
    p_e = Fraction(0)
    for cls in classes:
        p_e += Fraction(int(np.sum(t == cls)) * int(np.sum(p == cls)), n * n)
    if p_e == 1:
        return 0.0
    return float((p_o - p_e) / (1 - p_e))


def weighted_f1(y_true, y_pred) -> float:
    """Support-weighted mean of per-class F1 over classes in ``y_true``."""
    t, p = _labels(y_true, y_pred)
    total = Fraction(0)
    for cls in sorted(set(t.tolist())):
        tp = int(np.sum((t == cls) & (p == cls)))
        fp = int(np.sum((t != cls) & (p == cls)))
        fn = int(np.sum((t == cls) & (p != cls)))
        denom = 2 * tp + fp + fn
        f1 = Fraction(0) if denom == 0 else Fraction(2 * tp, denom)
        total += Fraction(int(np.sum(t == cls)), t.size) * f1
    return float(total)


def _binary_scores(y_true, scores) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(y_true).reshape(-1)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if t.size == 0:
        raise MetricError("metric inputs are empty")
    if t.shape != s.shape:
        raise MetricError(f"length mismatch: {t.size} labels vs {s.size} scores")
    if not np.all(np.isfinite(s)):
        raise MetricError("scores must be finite")
    classes = set(t.tolist())
    if classes != {0, 1}:
        raise MetricError(f"needs both binary classes {{0, 1}}, got {sorted(classes)}")
    return t.astype(np.int64), s


def auroc(y_true, scores) -> float:
    """Tie-corrected Mann-Whitney rank statistic."""
    t, s = _binary_scores(y_true, scores)
    ranks = rankdata(s, method="average")
    n_pos = int(np.sum(t == 1))
    n_neg = t.size - n_pos
    u = float(np.sum(ranks[t == 1])) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def auc_pr(y_true, scores) -> float:
    """Area under the precision-recall curve with step interpolation.

    Samples sharing a score enter the positive set together; no
    threshold can separate them.
    """
    t, s = _binary_scores(y_true, scores)
    order = np.argsort(-s, kind="stable")
    t_sorted = t[order]
    s_sorted = s[order]
    n_pos = int(np.sum(t == 1))
    n = t.size
    tp = 0
    seen = 0
    area = 0.0
    prev_recall = 0.0
    i = 0
    while i < n:
        j = i
        while j + 1 < n and s_sorted[j + 1] == s_sorted[i]:
            j += 1
        tp += int(np.sum(t_sorted[i : j + 1] == 1))
        seen += j - i + 1
        precision = tp / seen
        recall = tp / n_pos
        area += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return area


def summarize(y_true, y_pred, scores=None) -> dict[str, float]:
    """All applicable metrics in one record.

    The ranking metrics are included only when ``scores`` is given,
    since they are defined for binary tasks with per-sample scores.
    """
    record = {
        "balanced_accuracy": balanced_accuracy(y_true, y_pred),
        "cohens_kappa": cohens_kappa(y_true, y_pred),
        "weighted_f1": weighted_f1(y_true, y_pred),
    }
    if scores is not None:
        record["auroc"] = auroc(y_true, scores)
        record["auc_pr"] = auc_pr(y_true, scores)
    return record
