"""Dataset files (``.tpp.json``): schema, validation, splits and truncation.

File layout::

    {"num_marks": 2, "task": "multi-class",
     "sequences": [{"window": [0.0, 100.0],
                    "events": [{"time": 1.5, "labels": [0]}, ...]}, ...]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError

TASKS = ("multi-class", "multi-label")
SUFFIX = ".tpp.json"


@dataclass
class EventSequence:
    """Events with strictly increasing times inside an observation window."""

    times: np.ndarray
    labels: list
    window: tuple

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        self.labels = [tuple(sorted(set(int(m) for m in ls))) for ls in self.labels]
        self.window = (float(self.window[0]), float(self.window[1]))

    def __len__(self):
        return len(self.times)

    @property
    def length(self):
        return self.window[1] - self.window[0]

    def first_labels(self):
        return np.array([ls[0] for ls in self.labels], dtype=int)

    def check(self, num_marks, task, where="sequence"):
        lo, hi = self.window
        if not np.isfinite(lo) or not np.isfinite(hi) or lo > hi:
            raise ValidationError(f"{where}.window: invalid window {list(self.window)}")
        if len(self.labels) != len(self.times):
            raise ValidationError(f"{where}.events: times/labels length mismatch")
        prev = None
        for i, (t, ls) in enumerate(zip(self.times, self.labels)):
            at = f"{where}.events[{i}]"
            if not np.isfinite(t) or t < lo or t > hi:
                raise ValidationError(f"{at}.time: {t} outside window [{lo}, {hi}]")
            if prev is not None and t <= prev:
                raise ValidationError(f"{at}.time: times must be strictly increasing")
            prev = t
            if not ls:
                raise ValidationError(f"{at}.labels: every event needs at least one label")
            if task == "multi-class" and len(ls) != 1:
                raise ValidationError(f"{at}.labels: multi-class events carry exactly one label")
            for m in ls:
                if m < 0 or m >= num_marks:
                    raise ValidationError(f"{at}.labels: label {m} not in [0, {num_marks})")


@dataclass
class DatasetFile:
    num_marks: int
    task: str
    sequences: list = field(default_factory=list)

    def __len__(self):
        return len(self.sequences)

    @property
    def multilabel(self):
        return self.task == "multi-label"

    def validate(self):
        if not isinstance(self.num_marks, int) or self.num_marks < 1:
            raise ValidationError(f"num_marks: expected a positive integer, got {self.num_marks!r}")
        if self.task not in TASKS:
            raise ValidationError(f"task: expected one of {TASKS}, got {self.task!r}")
        for i, seq in enumerate(self.sequences):
            seq.check(self.num_marks, self.task, where=f"sequences[{i}]")
        return self

    def subset(self, indices):
        return DatasetFile(self.num_marks, self.task, [self.sequences[i] for i in indices])

    def num_events(self):
        return int(sum(len(s) for s in self.sequences))

    def to_dict(self):
        return {
            "num_marks": self.num_marks,
            "task": self.task,
            "sequences": [
                {"window": [s.window[0], s.window[1]],
                 "events": [{"time": float(t), "labels": list(ls)}
                            for t, ls in zip(s.times, s.labels)]}
                for s in self.sequences
            ],
        }

    @classmethod
    def from_dict(cls, obj):
        if not isinstance(obj, dict):
            raise ValidationError("top level: expected an object")
        for key in ("num_marks", "task", "sequences"):
            if key not in obj:
                raise ValidationError(f"{key}: missing field")
        seqs = []
        for i, s in enumerate(obj["sequences"]):
            at = f"sequences[{i}]"
            if not isinstance(s, dict) or "window" not in s or "events" not in s:
                raise ValidationError(f"{at}: expected an object with 'window' and 'events'")
            win = s["window"]
            if not isinstance(win, list) or len(win) != 2:
                raise ValidationError(f"{at}.window: expected [w_minus, w_plus]")
            times, labels = [], []
            for j, ev in enumerate(s["events"]):
                if not isinstance(ev, dict) or "time" not in ev or "labels" not in ev:
                    raise ValidationError(f"{at}.events[{j}]: expected {{'time', 'labels'}}")
                if not isinstance(ev["labels"], list) or not all(
                        isinstance(m, int) and not isinstance(m, bool) for m in ev["labels"]):
                    raise ValidationError(f"{at}.events[{j}].labels: expected a list of integers")
                if len(set(ev["labels"])) != len(ev["labels"]):
                    raise ValidationError(f"{at}.events[{j}].labels: duplicate label")
                times.append(ev["time"])
                labels.append(ev["labels"])
            try:
                seqs.append(EventSequence(np.array(times, dtype=np.float64), labels, tuple(win)))
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"{at}: {exc}") from exc
        return cls(obj["num_marks"], obj["task"], seqs).validate()


def dumps(ds):
    """Canonical serialisation; the same dataset always gives the same bytes."""
    return json.dumps(ds.to_dict(), separators=(",", ":"), allow_nan=False) + "\n"


def save_dataset(ds, path):
    ds.validate()
    Path(path).write_text(dumps(ds))


def load_dataset(path):
    text = Path(path).read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    try:
        return DatasetFile.from_dict(obj)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from exc


@dataclass
class SplitSpec:
    fold: int = 0
    seed: int = 0
    fractions: tuple = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if not 0 <= self.fold < 5:
            raise ValidationError(f"fold must lie in [0, 5), got {self.fold}")


def make_splits(ds, spec):
    """Shuffle by (seed, fold) and cut into train/val/test by sequence."""
    n = len(ds)
    if n < 10:
        raise ValidationError(f"need at least 10 sequences to split, got {n}")
    perm = np.random.default_rng([spec.seed, spec.fold]).permutation(n)
    n_train = int(round(spec.fractions[0] * n))
    n_val = int(round(spec.fractions[1] * n))
    return (ds.subset(perm[:n_train]),
            ds.subset(perm[n_train:n_train + n_val]),
            ds.subset(perm[n_train + n_val:]))


def truncate(ds, max_len=400):
    """Keep the first ``max_len`` events; a cut sequence ends at its last kept event."""
    if max_len < 1:
        raise ValidationError("max_len must be at least 1")
    out = []
    for s in ds.sequences:
        if len(s) <= max_len:
            out.append(s)
        else:
            out.append(EventSequence(s.times[:max_len], s.labels[:max_len],
                                     (s.window[0], float(s.times[max_len - 1]))))
    return DatasetFile(ds.num_marks, ds.task, out)


@dataclass
class DatasetStats:
    beta_hat: float
    mark_counts: list
    length_histogram: dict

    def to_dict(self):
        return {"beta_hat": self.beta_hat, "mark_counts": self.mark_counts,
                "length_histogram": self.length_histogram}


def dataset_stats(train):
    from .encoders import estimate_beta

    counts = np.zeros(train.num_marks, dtype=int)
    hist = {}
    for s in train.sequences:
        for ls in s.labels:
            counts[list(ls)] += 1
        hist[str(len(s))] = hist.get(str(len(s)), 0) + 1
    hist = dict(sorted(hist.items(), key=lambda kv: int(kv[0])))
    return DatasetStats(estimate_beta(train.sequences), counts.tolist(), hist)
