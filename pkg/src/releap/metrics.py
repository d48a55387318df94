"""Discrimination, threshold and calibration metrics.

AUC uses the Mann-Whitney rank formulation, the threshold metrics pick the
max-TPR cut with FPR at or below a target, and the C-index is Harrell's
pairwise estimator (equal times are not comparable).
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError

LOGISTIC_METRICS = ("auc", "f1", "tpr", "ppv", "prob_mse", "threshold_used")
SURVIVAL_METRICS = ("c_index",)


@dataclass
class MetricsReport:
    auc: float | None = None
    f1: float | None = None
    tpr: float | None = None
    ppv: float | None = None
    prob_mse: float | None = None
    c_index: float | None = None
    threshold_used: float | None = None
    n_eval: int = 0

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def primary(self, mode: str) -> float | None:
        return self.auc if mode == "logistic" else self.c_index


def _binary(labels):
    labels = np.asarray(labels).astype(np.int64)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("metric needs both classes present")
    return labels, n_pos, n_neg


def auc(scores, labels) -> float:
    scores = np.asarray(scores, dtype=float)
    labels, n_pos, n_neg = _binary(labels)
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class ThresholdResult:
    threshold: float
    tpr: float
    ppv: float
    f1: float


def threshold_metrics(scores, labels, target_fpr: float = 0.1) -> ThresholdResult:
    """Operating point: the lowest cut (predict positive when score >= cut) with FPR <= target."""
    if not 0 < target_fpr < 1:
        raise ValueError("target_fpr must lie in (0, 1)")
    scores = np.asarray(scores, dtype=float)
    labels, n_pos, n_neg = _binary(labels)

    cuts = np.unique(scores)[::-1]
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    l_sorted = labels[order]
    # number of rows with score >= cut, for each cut in descending order
    n_at = np.searchsorted(-s_sorted, -cuts, side="right")
    tp_cum = np.concatenate([[0], np.cumsum(l_sorted)])
    tp = tp_cum[n_at]
    fp = n_at - tp
    ok = fp / n_neg <= target_fpr
    if not np.any(ok):
        return ThresholdResult(threshold=float("inf"), tpr=0.0, ppv=0.0, f1=0.0)
    j = np.flatnonzero(ok)[-1]
    tp_j, fp_j = int(tp[j]), int(fp[j])
    tpr = tp_j / n_pos
    ppv = tp_j / (tp_j + fp_j) if tp_j + fp_j else 0.0
    f1 = 2 * tpr * ppv / (tpr + ppv) if tpr + ppv > 0 else 0.0
    return ThresholdResult(threshold=float(cuts[j]), tpr=float(tpr), ppv=float(ppv), f1=float(f1))


def prob_mse(probs, labels) -> float:
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=float)
    return float(np.mean((probs - labels) ** 2))


def c_index(risk, t, event) -> float:
    risk = np.asarray(risk, dtype=float)
    t = np.asarray(t, dtype=float)
    event = np.asarray(event).astype(bool)
    rows = np.flatnonzero(event)
    comparable = 0
    credit = 0.0
    # chunk rows to bound the pair matrix; O(n^2) overall
    for start in range(0, len(rows), 256):
        i = rows[start:start + 256]
        comp = t[i][:, None] < t[None, :]
        diff = risk[i][:, None] - risk[None, :]
        comparable += int(comp.sum())
        credit += float(np.sum(comp & (diff > 0)) + 0.5 * np.sum(comp & (diff == 0)))
    if comparable == 0:
        raise UndefinedMetricError("no comparable pairs for the C-index")
    return credit / comparable


def logistic_report(probs, labels, target_fpr: float = 0.1) -> MetricsReport:
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels)
    report = MetricsReport(n_eval=len(labels))
    if len(labels) == 0 or len(np.unique(labels)) < 2:
        return report
    op = threshold_metrics(probs, labels, target_fpr)
    report.auc = auc(probs, labels)
    report.f1, report.tpr, report.ppv = op.f1, op.tpr, op.ppv
    report.threshold_used = op.threshold
    report.prob_mse = prob_mse(probs, labels)
    return report


def survival_report(risk, t, event) -> MetricsReport:
    report = MetricsReport(n_eval=len(np.asarray(t)))
    try:
        report.c_index = c_index(risk, t, event)
    except UndefinedMetricError:
        pass
    return report


def stratified_report(mode: str, scores, group, *, labels=None, t=None, event=None,
                      target_fpr: float = 0.1) -> dict[int, MetricsReport]:
    """Apply the mode's metrics within group 0 and group 1 separately.

    A stratum that is empty or lacks what the metric needs gets a report with
    every metric absent.
    """
    scores = np.asarray(scores, dtype=float)
    group = np.asarray(group).astype(bool)
    out = {}
    for g, mask in ((0, ~group), (1, group)):
        if mode == "logistic":
            out[g] = logistic_report(scores[mask], np.asarray(labels)[mask], target_fpr)
        else:
            out[g] = survival_report(scores[mask], np.asarray(t)[mask], np.asarray(event)[mask])
    return out
