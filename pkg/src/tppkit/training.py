"""Maximum-likelihood training with Adam, a Noam schedule and early stopping."""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import ad
from .encoders import estimate_beta
from .errors import NumericalError, ValidationError
from .likelihood import Batch, batch_loglik, batch_nll_per_time
from .metrics import MetricsReport, weighted_f1, weighted_roc_auc
from .model import ModelConfig, TPPModel

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
EVAL_STREAM = 1 << 30  # rng stream id reserved for evaluation


@dataclass
class TrainConfig:
    encoder: str = "gru"
    decoder: str = "mlp-mc"
    hidden: int = 8
    layers: int = 1
    heads: int = 1
    batch_size: int | None = None
    lr: float = 0.01
    warmup_epochs: int = 10
    patience: int = 100
    max_epochs: int = 1000
    mc_samples: int = 50
    eval_mc_samples: int = 1000
    val_mc_samples: int | None = None
    eval_batch_size: int = 16
    lnm_components: int = 4
    pooling: str = "mean"
    query_time: str = "absolute"
    seed: int = 0
    task: str | None = None

    @classmethod
    def from_dict(cls, obj):
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValidationError(f"config: unknown field(s) {sorted(unknown)}")
        cfg = cls(**obj)
        cfg.validate()
        return cfg

    def validate(self):
        for key in ("hidden", "layers", "heads", "warmup_epochs", "patience", "max_epochs",
                    "mc_samples", "eval_mc_samples", "eval_batch_size", "lnm_components"):
            v = getattr(self, key)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ValidationError(f"config.{key}: expected a positive integer, got {v!r}")
        if self.batch_size is not None and (not isinstance(self.batch_size, int) or self.batch_size < 1):
            raise ValidationError("config.batch_size: expected a positive integer")
        if not (isinstance(self.lr, (int, float)) and self.lr > 0):
            raise ValidationError("config.lr: expected a positive number")
        if self.task not in (None, "multi-class", "multi-label"):
            raise ValidationError(f"config.task: unknown task {self.task!r}")
        return self

    def to_dict(self):
        return asdict(self)


def default_batch_size(num_sequences):
    """Larger datasets get larger batches."""
    if num_sequences <= 1000:
        return 32
    if num_sequences <= 10000:
        return 64
    return 128


def noam_lr(step, warmup_steps, peak=0.01):
    """Linear warm-up to ``peak`` at ``warmup_steps``, then inverse square-root decay."""
    if step < 1:
        raise ValueError("step counts from 1")
    if warmup_steps < 1:
        raise ValueError("warmup_steps must be at least 1")
    return peak * min(step / warmup_steps, math.sqrt(warmup_steps / step))


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update in place; ``state`` maps name -> (m, v, t)."""
    for name, node in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
        m, v, t = state.get(name, (np.zeros(node.shape), np.zeros(node.shape), 0))
        t += 1
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
        m_hat = m / (1.0 - ADAM_BETA1 ** t)
        v_hat = v / (1.0 - ADAM_BETA2 ** t)
        node.value -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        state[name] = (m, v, t)
    return state


def _batches(n, size, rng=None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def model_config(cfg, train_ds):
    task = cfg.task or train_ds.task
    if task != train_ds.task:
        raise ValidationError(f"config task {task!r} does not match dataset task {train_ds.task!r}")
    return ModelConfig(num_marks=train_ds.num_marks, encoder=cfg.encoder, decoder=cfg.decoder,
                       hidden=cfg.hidden, layers=cfg.layers, heads=cfg.heads,
                       beta_hat=estimate_beta(train_ds.sequences),
                       multilabel=task == "multi-label", mc_samples=cfg.mc_samples,
                       eval_mc_samples=cfg.eval_mc_samples, lnm_components=cfg.lnm_components,
                       pooling=cfg.pooling, query_time=cfg.query_time, seed=cfg.seed)


def _interval_scores(model, ds, batch_size, samples, seed):
    """Per-sequence log-likelihoods and per-event intensities at the true event times."""
    lls, lam_rows, label_rows = [], [], []
    for k, idx in enumerate(_batches(len(ds), batch_size)):
        batch = Batch.from_sequences([ds.sequences[i] for i in idx], ds.num_marks)
        rng = np.random.default_rng([seed, EVAL_STREAM, k])
        out = model.interval_outputs(batch, train=False, rng=rng, samples=samples)
        lls.append(batch_loglik(out, batch, ds.multilabel).value)
        mask = batch.event_interval_mask
        lam_rows.append(out.lam.value[mask])
        label_rows.append(batch.end_labels[mask])
    M = ds.num_marks
    lam = np.concatenate(lam_rows) if lam_rows else np.zeros((0, M))
    labels = np.concatenate(label_rows) if label_rows else np.zeros((0, M))
    return np.concatenate(lls), lam, labels


def evaluate(model, ds, batch_size=16, samples=None, seed=0):
    """NLL/time plus weighted F1 (multi-class) or weighted ROC-AUC (multi-label)."""
    if ds.num_marks != model.num_marks:
        raise ValidationError(
            f"dataset has {ds.num_marks} marks but the model was trained on {model.num_marks}")
    if ds.multilabel != model.multilabel:
        raise ValidationError("dataset task does not match the model's task")
    lengths = np.array([s.length for s in ds.sequences])
    if len(lengths) == 0 or np.any(lengths <= 0):
        raise ValidationError("evaluation needs a non-empty dataset with positive windows")
    lls, lam, labels = _interval_scores(model, ds, batch_size, samples, seed)
    report = MetricsReport(nll_per_time=math.fsum(-lls / lengths) / len(lengths),
                           num_sequences=len(ds), num_events=ds.num_events(),
                           sequence_logliks=lls.tolist())
    if len(lam):
        if ds.multilabel:
            try:
                report.weighted_roc_auc = weighted_roc_auc(lam, labels > 0)
            except ValidationError:
                report.weighted_roc_auc = None
        else:
            report.weighted_f1 = weighted_f1(lam.argmax(axis=1), labels.argmax(axis=1),
                                             ds.num_marks)
    return report


@dataclass
class TrainResult:
    model: TPPModel
    checkpoint: dict
    runlog: list
    timings: list


def _snapshot(model, cfg, epoch, best_val, data=None):
    return {"config": cfg.to_dict(), "model_config": model.cfg.to_dict(),
            "beta_hat": model.cfg.beta_hat, "epoch": epoch, "best_val_nll_per_time": best_val,
            "state": copy.deepcopy(model.state()), "data": data or {}}


def train(cfg, train_ds, val_ds, on_epoch=None, data=None):
    """Fit a model; returns the best checkpoint (by validation NLL/time) and the run log."""
    cfg.validate()
    train_ds.validate()
    val_ds.validate()
    if val_ds.num_marks != train_ds.num_marks or val_ds.task != train_ds.task:
        raise ValidationError("train and validation files disagree on marks or task")
    model = TPPModel(model_config(cfg, train_ds))
    batch_size = cfg.batch_size or default_batch_size(len(train_ds))
    n_batches = math.ceil(len(train_ds) / batch_size)
    warmup = cfg.warmup_epochs * n_batches
    val_samples = cfg.val_mc_samples or cfg.eval_mc_samples
    params = dict(model.store.items())
    adam_state = {}
    runlog, timings = [], []
    best_val = math.inf
    best = _snapshot(model, cfg, 0, best_val, data)
    since_best = 0
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        started = time.perf_counter()
        order_rng = np.random.default_rng([cfg.seed, epoch])
        losses = []
        try:
            for k, idx in enumerate(_batches(len(train_ds), batch_size, order_rng)):
                step += 1
                batch = Batch.from_sequences([train_ds.sequences[i] for i in idx],
                                             train_ds.num_marks)
                rng = np.random.default_rng([cfg.seed, epoch, k])
                out = model.interval_outputs(batch, train=True, rng=rng, samples=cfg.mc_samples)
                loss = batch_nll_per_time(out, batch, model.multilabel)
                grads = ad.backward(loss)
                lr = noam_lr(step, warmup, cfg.lr)
                adam_step(params, grads, adam_state, lr)
                losses.append(float(loss.value) * len(idx))
            val = evaluate(model, val_ds, cfg.eval_batch_size, val_samples, cfg.seed)
        except NumericalError as exc:
            runlog.append({"epoch": epoch, "aborted": str(exc)})
            break
        train_nll = math.fsum(losses) / len(train_ds)
        entry = {"epoch": epoch, "train_nll_per_time": train_nll,
                 "val_nll_per_time": val.nll_per_time, "lr": lr}
        if not math.isfinite(val.nll_per_time):
            runlog.append({"epoch": epoch, "aborted": "validation NLL is not finite"})
            break
        if val.nll_per_time < best_val:
            best_val = val.nll_per_time
            best = _snapshot(model, cfg, epoch, best_val, data)
            since_best = 0
        else:
            since_best += 1
        entry["best_val_nll_per_time"] = best_val
        runlog.append(entry)
        timings.append({"epoch": epoch, "seconds": time.perf_counter() - started})
        if on_epoch is not None:
            on_epoch(entry)
        if since_best >= cfg.patience:
            break
    model.load_state(best["state"])
    return TrainResult(model, best, runlog, timings)


def model_from_checkpoint(ckpt):
    model = TPPModel(ModelConfig(**ckpt["model_config"]))
    model.load_state(ckpt["state"])
    return model


def save_checkpoint(ckpt, path):
    Path(path).write_text(json.dumps(ckpt, sort_keys=True) + "\n")


def load_checkpoint(path):
    try:
        ckpt = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    for key in ("config", "model_config", "state"):
        if key not in ckpt:
            raise ValidationError(f"{path}: checkpoint is missing {key!r}")
    return ckpt


def write_runlog(entries, path):
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")


__all__ = ["TrainConfig", "noam_lr", "adam_step", "train", "evaluate", "save_checkpoint",
           "load_checkpoint", "model_from_checkpoint", "default_batch_size"]
