"""Batched interval layout and TPP log-likelihoods.

A sequence with N events on [w-, w+] is cut into N + 1 intervals: interval j
runs from t_j to t_{j+1} (t_0 = w-, t_{N+1} = w+). Intervals 0..N-1 end in an
observed event; interval N is the event-free tail. Models report, for every
interval, the per-mark intensity at its right end and the per-mark
compensator accumulated over it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ad
from .errors import ShapeError, ValidationError

LOG_FLOOR = 1e-30
P_CEILING = 1.0 - 1e-12


@dataclass
class Batch:
    times: np.ndarray          # (B, L) padded with the window end
    labels: np.ndarray         # (B, L, M) multi-hot, zero for padding
    event_mask: np.ndarray     # (B, L)
    n_events: np.ndarray       # (B,)
    window: np.ndarray         # (B, 2)
    starts: np.ndarray         # (B, J) interval left ends, J = L + 1
    ends: np.ndarray           # (B, J) interval right ends
    interval_mask: np.ndarray  # (B, J) j <= N
    event_interval_mask: np.ndarray  # (B, J) j < N
    end_labels: np.ndarray     # (B, J, M) labels of the event closing interval j

    @property
    def size(self):
        return len(self.n_events)

    @property
    def num_intervals(self):
        return self.starts.shape[1]

    @property
    def tail_mask(self):
        return self.interval_mask & ~self.event_interval_mask

    @classmethod
    def from_sequences(cls, seqs, num_marks):
        if not seqs:
            raise ValidationError("empty batch")
        B = len(seqs)
        L = max(1, max(len(s) for s in seqs))
        times = np.zeros((B, L))
        labels = np.zeros((B, L, num_marks))
        event_mask = np.zeros((B, L), dtype=bool)
        window = np.array([s.window for s in seqs], dtype=np.float64)
        n = np.array([len(s) for s in seqs], dtype=int)
        for b, s in enumerate(seqs):
            k = len(s)
            times[b, :k] = s.times
            times[b, k:] = s.window[1]
            event_mask[b, :k] = True
            for i, ls in enumerate(s.labels):
                if any(m >= num_marks for m in ls):
                    raise ValidationError(f"label outside [0, {num_marks})")
                labels[b, i, list(ls)] = 1.0
        starts = np.concatenate([window[:, :1], times], axis=1)
        ends = np.concatenate([times, window[:, 1:]], axis=1)
        for b, k in enumerate(n):
            ends[b, k] = window[b, 1]
            starts[b, k + 1:] = window[b, 1]
            ends[b, k + 1:] = window[b, 1]
        j = np.arange(L + 1)[None, :]
        end_labels = np.concatenate([labels, np.zeros((B, 1, num_marks))], axis=1)
        return cls(times, labels, event_mask, n, window, starts, ends,
                   j <= n[:, None], j < n[:, None], end_labels)


@dataclass
class IntervalOutputs:
    """Per-interval model outputs, each (B, J, M).

    ``log_lam`` may be supplied by models that compute log-intensities more
    accurately than ``log(lam)``.
    """

    lam: ad.Node
    big_lam: ad.Node
    log_lam: ad.Node | None = None
    attention: dict = field(default_factory=dict)


def conditional_density(lam, big_lam_all):
    """p_m = lam_m exp(-sum_n Lambda_n), evaluated through log space."""
    lam = np.asarray(lam, dtype=np.float64)
    big = np.asarray(big_lam_all, dtype=np.float64)
    if np.any(lam < 0) or np.any(big < 0):
        raise ValueError("intensities and compensators must be non-negative")
    with np.errstate(divide="ignore"):
        return np.exp(np.log(lam) - big.sum(axis=-1, keepdims=True))


def batch_loglik(out, batch, multilabel=False):
    """Per-sequence log-likelihood, a (B,) node."""
    lam, big = ad.as_node(out.lam), ad.as_node(out.big_lam)
    expected = batch.end_labels.shape
    if lam.shape != expected or big.shape != expected:
        raise ShapeError(f"model outputs {lam.shape}/{big.shape}, expected {expected}")
    log_lam = out.log_lam if out.log_lam is not None else ad.log(ad.add(lam, LOG_FLOOR))
    total = ad.sum(big, axis=-1)
    y = batch.end_labels
    ev = batch.event_interval_mask.astype(np.float64)
    tail = batch.tail_mask.astype(np.float64)
    n_labels = y.sum(axis=-1)
    present = ad.sub(ad.sum(ad.mul(log_lam, y), axis=-1), ad.mul(total, n_labels))
    per_interval = ad.sub(ad.mul(present, ev), ad.mul(total, tail))
    if multilabel:
        log_p = ad.sub(log_lam, ad.reshape(total, total.shape + (1,)))
        p = ad.exp(ad.clamp_min(log_p, -700.0))
        absent_ll = ad.log(ad.clamp_min(ad.sub(1.0, p), 1.0 - P_CEILING))
        absent = (1.0 - y) * ev[..., None]
        per_interval = ad.add(per_interval, ad.sum(ad.mul(absent_ll, absent), axis=-1))
    return ad.sum(per_interval, axis=-1)


def batch_nll_per_time(out, batch, multilabel=False):
    """Mean over the batch of -loglik / window length (the training loss)."""
    lengths = batch.window[:, 1] - batch.window[:, 0]
    if np.any(lengths <= 0):
        raise ValidationError("nll per time needs windows of positive length")
    return ad.mean(ad.div(ad.negate(batch_loglik(out, batch, multilabel)), lengths))


def _event_terms(out, batch, b):
    n = int(batch.n_events[b])
    lam = out.lam.value[b]
    log_lam = out.log_lam.value[b] if out.log_lam is not None else np.log(lam + LOG_FLOOR)
    total = out.big_lam.value[b].sum(axis=-1)
    y = batch.end_labels[b]
    return (log_lam[:n] * y[:n]).sum(-1) - total[:n] * y[:n].sum(-1), total[n]


def loglik_multiclass(model, seq):
    """Returns (loglik, per-event log p terms); the tail term is loglik - sum(terms)."""
    if any(len(ls) != 1 for ls in seq.labels):
        raise ValidationError("multi-class log-likelihood needs exactly one label per event")
    batch = Batch.from_sequences([seq], model.num_marks)
    out = model.interval_outputs(batch)
    terms, tail = _event_terms(out, batch, 0)
    return float(terms.sum() - tail), terms


def loglik_multilabel(model, seq):
    batch = Batch.from_sequences([seq], model.num_marks)
    out = model.interval_outputs(batch)
    return float(batch_loglik(out, batch, multilabel=True).value[0])


def sequence_logliks(model, dataset, batch_size=64, multilabel=None):
    """Log-likelihood of every sequence, in dataset order."""
    if multilabel is None:
        multilabel = dataset.multilabel
    vals = []
    seqs = dataset.sequences
    for i in range(0, len(seqs), batch_size):
        batch = Batch.from_sequences(seqs[i:i + batch_size], dataset.num_marks)
        out = model.interval_outputs(batch)
        vals.append(batch_loglik(out, batch, multilabel).value)
    return np.concatenate(vals) if vals else np.zeros(0)


def nll_per_time(model, dataset, batch_size=64):
    lengths = np.array([s.length for s in dataset.sequences])
    if len(lengths) == 0:
        raise ValidationError("empty dataset")
    if np.any(lengths <= 0):
        raise ValidationError("nll per time needs windows of positive length")
    ll = sequence_logliks(model, dataset, batch_size)
    # fsum keeps the result independent of sequence order
    return math.fsum(-ll / lengths) / len(lengths)
