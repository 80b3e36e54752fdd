"""AUC and LogLoss."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..tensorcore import PRED_EPS


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    auc: float
    logloss: float
    n: int
    split: str

    def to_dict(self) -> dict:
        return asdict(self)


def midranks(values) -> np.ndarray:
    """1-based ranks with tied values sharing the mean of their rank span."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="mergesort")
    sv = v[order]
    # start index of each run of equal values
    starts = np.flatnonzero(np.r_[True, sv[1:] != sv[:-1]])
    ends = np.r_[starts[1:], len(sv)]
    run_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(len(v))
    ranks[order] = np.repeat(run_rank, ends - starts)
    return ranks


def auc(scores, labels) -> float:
    """Rank-based ROC AUC; ties between a positive and a negative count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise MetricError(f"scores {s.shape} and labels {y.shape} must be equal-length vectors")
    pos = int(y.sum())
    neg = len(y) - pos
    if pos == 0 or neg == 0:
        raise MetricError("AUC is undefined without both positive and negative labels")
    r = midranks(s)
    return float((r[y].sum() - pos * (pos + 1) / 2.0) / (pos * neg))


def pairwise_auc(scores, labels) -> float:
    """O(P * N) reference: fraction of positive-negative pairs ranked correctly."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    sp, sn = s[y], s[~y]
    if len(sp) == 0 or len(sn) == 0:
        raise MetricError("AUC is undefined without both positive and negative labels")
    wins = 0.0
    for p in sp:
        wins += np.sum(p > sn) + 0.5 * np.sum(p == sn)
    return float(wins / (len(sp) * len(sn)))


def logloss(preds, labels) -> float:
    p = np.clip(np.asarray(preds, dtype=np.float64), PRED_EPS, 1.0 - PRED_EPS)
    y = np.asarray(labels, dtype=np.float64)
    if p.size == 0:
        raise MetricError("logloss of an empty prediction set")
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def report(preds, labels, split: str) -> MetricReport:
    return MetricReport(auc(preds, labels), logloss(preds, labels), int(len(labels)), split)
