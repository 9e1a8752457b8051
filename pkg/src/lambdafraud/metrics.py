"""ROC AUC, average precision and precision-recall curves.

Ties are explicit: AUC gives half credit to tied positive/negative pairs, and
equal scores form a single threshold step in the PR curve and AP.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    pass


def _prep(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    return s, y.astype(np.int64)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney U over ``n_pos * n_neg`` using average ranks."""
    s, y = _prep(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC AUC needs both classes")
    ranks = rankdata(s, method="average")
    u = float(ranks[y == 1].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def _threshold_counts(s, y):
    """Cumulative (tp, fp) at each distinct score, scanning from the highest."""
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    last_of_group = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    tp = np.cumsum(y_sorted)[last_of_group]
    fp = np.cumsum(1 - y_sorted)[last_of_group]
    return tp, fp


def pr_curve(scores, labels) -> list[tuple[float, float]]:
    """One ``(recall, precision)`` point per distinct score, recall non-decreasing."""
    s, y = _prep(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("precision-recall needs at least one positive")
    tp, fp = _threshold_counts(s, y)
    return [(int(a) / n_pos, int(a) / int(a + b)) for a, b in zip(tp, fp)]


def step_integral(curve: list[tuple[float, float]]) -> float:
    """sum_k (R_k - R_{k-1}) * P_k with R_0 = 0."""
    prev = 0.0
    terms = []
    for r, p in curve:
        terms.append((r - prev) * p)
        prev = r
    return math.fsum(terms)


def average_precision(scores, labels) -> float:
    return step_integral(pr_curve(scores, labels))


@dataclass
class EvalResult:
    roc_auc: float
    average_precision: float
    n_pos: int
    n_neg: int
    pr_curve: list[tuple[float, float]]

    def report(self) -> dict:
        d = asdict(self)
        d.pop("pr_curve")
        return d


def evaluate(scores, labels) -> EvalResult:
    s, y = _prep(scores, labels)
    curve = pr_curve(s, y)
    return EvalResult(roc_auc(s, y), step_integral(curve), int(y.sum()), int((1 - y).sum()), curve)


def write_report(result: EvalResult, out: str | Path) -> tuple[Path, Path]:
    """Write ``<out>`` as JSON metrics and ``<out>.pr.tsv`` as a two-column curve."""
    out = Path(out)
    out.write_text(json.dumps(result.report(), sort_keys=True, indent=2) + "\n")
    pr_path = out.with_name(out.name + ".pr.tsv")
    with open(pr_path, "w") as fh:
        fh.write("recall\tprecision\n")
        for r, p in result.pr_curve:
            fh.write(f"{r!r}\t{p!r}\n")
    return out, pr_path
