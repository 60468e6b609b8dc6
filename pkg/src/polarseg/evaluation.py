"""Segmentation and screening metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class MetricError(ValueError):
    pass


def _pair(s, g):
    s = np.asarray(s, dtype=bool)
    g = np.asarray(g, dtype=bool)
    if s.shape != g.shape:
        raise MetricError(f"mask shapes differ: {s.shape} vs {g.shape}")
    return s, g


def overlap_error(s, g) -> float:
    """1 - |S ∩ G| / |S ∪ G|."""
    s, g = _pair(s, g)
    union = np.count_nonzero(s | g)
    if union == 0:
        raise MetricError("overlap error undefined: both masks are empty")
    return 1.0 - np.count_nonzero(s & g) / union


def sensitivity_specificity(s, g) -> tuple:
    s, g = _pair(s, g)
    tp = np.count_nonzero(s & g)
    tn = np.count_nonzero(~s & ~g)
    fp = np.count_nonzero(s & ~g)
    fn = np.count_nonzero(~s & g)
    if tp + fn == 0 or tn + fp == 0:
        raise MetricError("ground truth must contain both foreground and background")
    return tp / (tp + fn), tn / (tn + fp)


def balanced_accuracy(s, g) -> float:
    sen, spe = sensitivity_specificity(s, g)
    return 0.5 * (sen + spe)


def rim_mask(disc, cup) -> np.ndarray:
    disc, cup = _pair(disc, cup)
    return disc & ~cup


def cdr_error(cdr_s: float, cdr_g: float) -> float:
    return abs(cdr_s - cdr_g)


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def roc_auc(scores, labels) -> RocCurve:
    """ROC by sweeping every distinct score; AUC by the trapezoid rule.

    Tied scores move FPR and TPR together, which makes the trapezoid area
    equal to the Mann-Whitney statistic with ties counted as one half.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if scores.shape != labels.shape:
        raise MetricError(f"{scores.size} scores but {labels.size} labels")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC needs both positive and negative labels")
    order = np.argsort(-scores, kind="stable")
    s_sorted, l_sorted = scores[order], labels[order]
    thresholds, first = np.unique(-s_sorted, return_index=True)
    thresholds = -thresholds
    # cumulative counts at the end of each run of tied scores
    ends = np.append(first[1:], s_sorted.size) - 1
    tp = np.cumsum(l_sorted)[ends]
    fp = np.cumsum(~l_sorted)[ends]
    tp = np.concatenate([[0], tp]).astype(np.int64)
    fp = np.concatenate([[0], fp]).astype(np.int64)
    # integer twice-area keeps the result exact
    twice_area = int(np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])))
    auc = (twice_area / 2) / (n_pos * n_neg)
    return RocCurve(fpr=fp / n_neg, tpr=tp / n_pos,
                    thresholds=np.concatenate([[np.inf], thresholds]), auc=auc)


def _betacf(a: float, b: float, x: float, max_iter: int = 300, tol: float = 1e-15) -> float:
    """Continued fraction for the regularized incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def pearson_corr(x, y) -> tuple:
    """Pearson r and its two-sided p-value from the t distribution with n-2 dof."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    n = x.size
    if n != y.size:
        raise MetricError(f"length mismatch: {n} vs {y.size}")
    if n < 3:
        raise MetricError(f"need at least 3 pairs, got {n}")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise MetricError("zero variance in one of the inputs")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    dof = n - 2
    if abs(r) == 1.0:
        return r, 0.0
    t2 = r * r * dof / (1.0 - r * r)
    p = betainc(dof / 2.0, 0.5, dof / (dof + t2))
    return r, p


@dataclass
class EvalRecord:
    name: str
    E_disc: float
    E_cup: float
    E_rim: float
    A_disc: float
    A_cup: float
    A_rim: float
    delta_E: float
    CDR_S: float
    CDR_G: float

    FIELDS = ("name", "E_disc", "A_disc", "E_cup", "A_cup", "E_rim", "A_rim", "delta_E", "CDR_S", "CDR_G")

    def row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]


def _safe(fn, s, g) -> float:
    try:
        return fn(s, g)
    except MetricError:
        return float("nan")


def evaluate_case(name: str, pred_disc, pred_cup, gt_disc, gt_cup, cdr_s: float, cdr_g: float) -> EvalRecord:
    """Overlap error and balanced accuracy for disc, cup and rim plus CDR error."""
    pred_rim, gt_rim = rim_mask(pred_disc, pred_cup), rim_mask(gt_disc, gt_cup)
    return EvalRecord(
        name=name,
        E_disc=_safe(overlap_error, pred_disc, gt_disc),
        E_cup=_safe(overlap_error, pred_cup, gt_cup),
        E_rim=_safe(overlap_error, pred_rim, gt_rim),
        A_disc=_safe(balanced_accuracy, pred_disc, gt_disc),
        A_cup=_safe(balanced_accuracy, pred_cup, gt_cup),
        A_rim=_safe(balanced_accuracy, pred_rim, gt_rim),
        delta_E=cdr_error(cdr_s, cdr_g),
        CDR_S=cdr_s,
        CDR_G=cdr_g,
    )


def summarize(records) -> dict:
    """Column means over records (NaNs skipped)."""
    out = {}
    for f in EvalRecord.FIELDS[1:]:
        vals = np.array([getattr(r, f) for r in records], dtype=np.float64)
        out[f] = float(np.nanmean(vals)) if np.isfinite(vals).any() else float("nan")
    return out
