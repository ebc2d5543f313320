"""Label-prediction metrics and the evaluation report."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ValidationError


def weighted_f1(predictions, truth, num_marks=None):
    """Per-class F1 averaged with weights proportional to true-class support."""
    pred = np.asarray(predictions, dtype=int)
    true = np.asarray(truth, dtype=int)
    if pred.shape != true.shape:
        raise ValidationError("predictions and truth differ in length")
    if pred.size == 0:
        raise ValidationError("weighted F1 of an empty set")
    if num_marks is None:
        num_marks = int(max(pred.max(), true.max())) + 1
    score = 0.0
    for m in range(num_marks):
        support = np.sum(true == m)
        if support == 0:
            continue
        tp = np.sum((pred == m) & (true == m))
        fp = np.sum((pred == m) & (true != m))
        fn = support - tp
        f1 = 2.0 * tp / (2.0 * tp + fp + fn)
        score += f1 * support
    return float(score / true.size)


def roc_auc(scores, labels):
    """Mann-Whitney AUC; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = labels.sum()
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUC needs both positive and negative instances")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def weighted_roc_auc(scores, truth):
    """Support-weighted mean of per-mark AUCs over marks having both classes."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=bool)
    if scores.shape != truth.shape or scores.ndim != 2:
        raise ValidationError("scores and truth must both be (events, marks)")
    total, weight = 0.0, 0
    for m in range(truth.shape[1]):
        col = truth[:, m]
        pos = int(col.sum())
        if pos == 0 or pos == col.size:
            continue
        total += roc_auc(scores[:, m], col) * pos
        weight += pos
    if weight == 0:
        raise ValidationError("no mark has both positive and negative events")
    return total / weight


@dataclass
class MetricsReport:
    nll_per_time: float
    weighted_f1: float | None = None
    weighted_roc_auc: float | None = None
    num_sequences: int = 0
    num_events: int = 0
    sequence_logliks: list = field(default_factory=list)

    def to_dict(self):
        return {"nll_per_time": self.nll_per_time, "weighted_f1": self.weighted_f1,
                "weighted_roc_auc": self.weighted_roc_auc,
                "num_sequences": self.num_sequences, "num_events": self.num_events}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @property
    def label_metric(self):
        return self.weighted_f1 if self.weighted_f1 is not None else self.weighted_roc_auc
