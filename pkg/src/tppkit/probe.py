"""Dataset validity check: does a conditional Poisson model already match a full TPP?

If a model whose intensity ignores the time since the last event scores as
well as a model that uses it, the dataset's timing carries no signal the
TPP can exploit, and benchmark rankings on it say little about temporal
modelling.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from .dataio import DatasetFile, EventSequence
from .errors import ValidationError

DEFAULT_MARGIN = 0.02


@dataclass
class ProbeReport:
    cp_nll_per_time: float
    model_nll_per_time: float
    cp_label_metric: float
    model_label_metric: float
    margin: float
    verdict: str

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def verdict(cp_nll, model_nll, cp_label, model_label, margin=DEFAULT_MARGIN):
    """``"suspect"`` when CP is within ``margin`` (relative) of the TPP on both metrics."""
    if margin < 0:
        raise ValidationError("margin must be non-negative")
    for name, v in (("cp NLL", cp_nll), ("model NLL", model_nll),
                    ("cp label metric", cp_label), ("model label metric", model_label)):
        if v is None or not np.isfinite(v):
            raise ValidationError(f"probe needs a finite {name}")
    nll_close = cp_nll <= model_nll + margin * abs(model_nll)
    label_close = cp_label >= model_label - margin * abs(model_label)
    return "suspect" if nll_close and label_close else "suitable"


def time_independence_probe(cp_report, model_report, margin=DEFAULT_MARGIN):
    """Compare two MetricsReports computed on the same held-out data."""
    cp_label, model_label = cp_report.label_metric, model_report.label_metric
    if cp_label is None or model_label is None:
        raise ValidationError("probe needs a label metric (F1 or ROC-AUC) for both models")
    v = verdict(cp_report.nll_per_time, model_report.nll_per_time, cp_label, model_label, margin)
    return ProbeReport(cp_report.nll_per_time, model_report.nll_per_time,
                       cp_label, model_label, margin, v)


def uniform_time_dataset(n_sequences, num_marks=3, rate=0.3, window=(0.0, 100.0), seed=0):
    """Homogeneous Poisson times with marks cycling 0, 1, ..., M-1, 0, ...

    Given the count, the times are i.i.d. uniform on the window, so the
    timing carries no information beyond a constant rate while the next
    mark is fully determined by the history.
    """
    rng = np.random.default_rng(seed)
    lo, hi = window
    seqs = []
    for _ in range(n_sequences):
        n = rng.poisson(rate * (hi - lo))
        times = np.sort(rng.uniform(lo, hi, size=n))
        times = np.unique(times)
        seqs.append(EventSequence(times, [(i % num_marks,) for i in range(len(times))], window))
    return DatasetFile(num_marks, "multi-class", seqs).validate()
