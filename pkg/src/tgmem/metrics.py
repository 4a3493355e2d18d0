"""Ranking metrics and the chi-square independence test.

average_precision and roc_auc follow their counting definitions exactly
(stable tie handling, half-credit ties for AUC); the chi-square upper
tail is computed from a hand-rolled regularized incomplete gamma
(series + Lentz continued fraction), accurate to ~1e-14.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import UndefinedMetricError


def average_precision(scores, labels) -> float:
    """Mean precision at each positive, ranks by descending score with
    ties broken by earlier input position."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if labels.sum() == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = np.cumsum(labels[order])
    ranks = np.arange(1, len(scores) + 1)
    at_pos = labels[order]
    return float(np.sum(hits[at_pos] / ranks[at_pos]) / labels.sum())


def roc_auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative; ties
    count one half.  Computed by exact integer pair counting."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("roc_auc needs both classes")
    neg_sorted = np.sort(scores[~labels])
    pos = scores[labels]
    wins = np.searchsorted(neg_sorted, pos, side="left").sum()
    ties = (np.searchsorted(neg_sorted, pos, side="right")
            - np.searchsorted(neg_sorted, pos, side="left")).sum()
    return float((2 * int(wins) + int(ties)) / (2 * n_pos * n_neg))


def chi_square_pvalue(table) -> float:
    """Pearson independence test p-value for an r x K contingency table
    (upper tail, (r-1)(K-1) degrees of freedom)."""
    obs = np.asarray(table, dtype=np.float64)
    if obs.ndim != 2 or obs.shape[0] < 2 or obs.shape[1] < 2:
        raise UndefinedMetricError("contingency table needs at least 2x2 cells")
    row = obs.sum(axis=1, keepdims=True)
    col = obs.sum(axis=0, keepdims=True)
    total = obs.sum()
    if np.any(row == 0) or np.any(col == 0) or total == 0:
        raise UndefinedMetricError("zero marginal in contingency table")
    expected = row * col / total
    stat = float(((obs - expected) ** 2 / expected).sum())
    dof = (obs.shape[0] - 1) * (obs.shape[1] - 1)
    return chi2_sf(stat, dof)


def chi2_sf(stat: float, dof: int) -> float:
    """Chi-square upper-tail probability Q(dof/2, stat/2)."""
    if stat < 0 or dof < 1:
        raise UndefinedMetricError("invalid chi-square inputs")
    if stat == 0.0:
        return 1.0
    return _gammaincc(dof / 2.0, stat / 2.0)


def _gammaincc(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x) for a > 0, x >= 0."""
    if x < 0 or a <= 0:
        raise UndefinedMetricError("invalid incomplete gamma arguments")
    if x == 0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_series(a, x)
    return _gamma_cf(a, x)


def _gamma_series(a: float, x: float, itmax: int = 500, eps: float = 1e-15) -> float:
    """Lower regularized gamma P(a, x) by its power series."""
    ap = a
    summ = 1.0 / a
    delta = summ
    for _ in range(itmax):
        ap += 1.0
        delta *= x / ap
        summ += delta
        if abs(delta) < abs(summ) * eps:
            break
    return summ * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cf(a: float, x: float, itmax: int = 500, eps: float = 1e-15) -> float:
    """Upper regularized gamma Q(a, x) by Lentz's continued fraction."""
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, itmax + 1):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))
