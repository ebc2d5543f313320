"""Multivariate Hawkes process with exponential kernels.

lambda_m(t) = mu_m + sum_n alpha[m, n] sum_{t_i^n < t} exp(-beta[m, n] (t - t_i^n))

Used as the ground-truth oracle (closed-form intensity, compensator and
log-likelihood) and as the synthetic data generator.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .dataio import DatasetFile, EventSequence


@dataclass
class HawkesParams:
    mu: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        m = len(self.mu)
        if self.alpha.shape != (m, m) or self.beta.shape != (m, m):
            raise ValueError("alpha and beta must be M x M")
        if np.any(self.mu <= 0) or np.any(self.alpha < 0) or np.any(self.beta <= 0):
            raise ValueError("need mu > 0, alpha >= 0, beta > 0")
        if self.spectral_radius() >= 1:
            warnings.warn("branching matrix alpha/beta has spectral radius >= 1; "
                          "the process is not stationary", RuntimeWarning, stacklevel=2)

    @property
    def num_marks(self):
        return len(self.mu)

    def spectral_radius(self):
        return float(np.max(np.abs(np.linalg.eigvals(self.alpha / self.beta))))

    def stationary_rates(self):
        """Long-run event rate per mark, (I - alpha/beta)^-1 mu."""
        return np.linalg.solve(np.eye(self.num_marks) - self.alpha / self.beta, self.mu)


PRESETS = {
    "independent": HawkesParams(mu=[0.1, 0.05],
                                alpha=[[0.2, 0.0], [0.0, 0.4]],
                                beta=[[1.0, 1.0], [1.0, 1.0]]),
    "dependent": HawkesParams(mu=[0.1, 0.05],
                              alpha=[[0.2, 0.1], [0.2, 0.3]],
                              beta=[[1.0, 1.0], [1.0, 2.0]]),
}


def _marks_of(labels):
    return np.array([ls[0] if not np.isscalar(ls) else ls for ls in labels], dtype=int)


def hawkes_intensity(p, times, marks, t):
    """Intensity vector at ``t`` given past events (only those with time < t count)."""
    times = np.asarray(times, dtype=np.float64)
    marks = np.asarray(marks, dtype=int)
    past = times < t
    dt = t - times[past]
    n = marks[past]
    return p.mu + np.sum(p.alpha[:, n] * np.exp(-p.beta[:, n] * dt), axis=1)


def hawkes_compensator(p, times, marks, a, b):
    """Integral of the intensity over [a, b] per mark."""
    if a > b:
        raise ValueError(f"compensator needs a <= b, got [{a}, {b}]")
    times = np.asarray(times, dtype=np.float64)
    marks = np.asarray(marks, dtype=int)
    past = times < b
    ti = times[past]
    n = marks[past]
    beta = p.beta[:, n]
    start = np.exp(-beta * np.maximum(a - ti, 0.0))
    stop = np.exp(-beta * (b - ti))
    return p.mu * (b - a) + np.sum(p.alpha[:, n] / beta * (start - stop), axis=1)


def simulate_thinning(p, window, rng):
    """Ogata thinning on ``window``; returns a multi-class EventSequence.

    Between events the total intensity only decays, so its value right after
    the current candidate bounds it until the next candidate.
    """
    lo, hi = float(window[0]), float(window[1])
    mu, alpha, beta = p.mu, p.alpha, p.beta
    excite = np.zeros_like(alpha)  # excite[m, n] = sum_i exp(-beta[m, n](t - t_i^n))
    t = lo
    times, marks = [], []
    while True:
        bound = float(np.sum(mu + np.sum(alpha * excite, axis=1)))
        w = rng.exponential(1.0 / bound)
        excite *= np.exp(-beta * w)
        t += w
        if t > hi:
            break
        lam = mu + np.sum(alpha * excite, axis=1)
        u = rng.uniform(0.0, bound)
        cum = np.cumsum(lam)
        if u < cum[-1]:
            m = int(np.searchsorted(cum, u, side="right"))
            times.append(t)
            marks.append(m)
            excite[:, m] += 1.0
    return EventSequence(np.array(times), [(m,) for m in marks], (lo, hi))


def simulate_dataset(p, n_sequences, window=(0.0, 100.0), seed=0):
    """Independent sequences; sequence i uses the seed ``seed ^ i``."""
    seqs = [simulate_thinning(p, window, np.random.default_rng(seed ^ i))
            for i in range(n_sequences)]
    return DatasetFile(p.num_marks, "multi-class", seqs)


def hawkes_exact_loglik(p, seq):
    marks = _marks_of(seq.labels)
    times = seq.times
    ll = 0.0
    for i, (t, m) in enumerate(zip(times, marks)):
        lam = hawkes_intensity(p, times[:i], marks[:i], t)
        ll += np.log(lam[m])
    lo, hi = seq.window
    return float(ll - np.sum(hawkes_compensator(p, times, marks, lo, hi)))


def interval_arrays(p, batch):
    """Exact (intensity at interval end, compensator over interval) for a Batch."""
    B, J = batch.starts.shape
    M = p.num_marks
    lam = np.zeros((B, J, M))
    big = np.zeros((B, J, M))
    for b in range(B):
        n = int(batch.n_events[b])
        times = batch.times[b, :n]
        marks = np.argmax(batch.labels[b, :n], axis=-1) if n else np.zeros(0, dtype=int)
        for j in range(n + 1):
            a, e = batch.starts[b, j], batch.ends[b, j]
            lam[b, j] = hawkes_intensity(p, times, marks, e)
            big[b, j] = hawkes_compensator(p, times[:j], marks[:j], a, e)
    return lam, big


class HawkesOracle:
    """Pseudo-model exposing the exact Hawkes intensities to the likelihood code."""

    multilabel = False

    def __init__(self, params):
        self.params = params
        self.num_marks = params.num_marks

    def interval_outputs(self, batch, **_):
        from . import ad
        from .likelihood import IntervalOutputs

        lam, big = interval_arrays(self.params, batch)
        return IntervalOutputs(ad.const(lam), ad.const(big))
