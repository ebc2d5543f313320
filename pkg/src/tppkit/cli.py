"""Command-line entry point: ``tppkit <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import dataio, hawkes
from .errors import NumericalError, ValidationError
from .likelihood import Batch
from .probe import time_independence_probe
from .training import (TrainConfig, evaluate, load_checkpoint, model_from_checkpoint,
                       save_checkpoint, train, write_runlog)

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


def _load_config(path):
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    env_seed = os.environ.get("TPPKIT_SEED")
    if env_seed is not None:
        try:
            obj["seed"] = int(env_seed)
        except ValueError:
            raise ValidationError(f"TPPKIT_SEED must be an integer, got {env_seed!r}") from None
    return TrainConfig.from_dict(obj)


def _write_json(obj, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def cmd_simulate_hawkes(args):
    if args.window[0] >= args.window[1]:
        raise ValidationError("--window needs A < B")
    if args.sequences < 1:
        raise ValidationError("--sequences must be positive")
    ds = hawkes.simulate_dataset(hawkes.PRESETS[args.preset], args.sequences,
                                 tuple(args.window), args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    dataio.save_dataset(ds, args.out)
    print(f"wrote {len(ds)} sequences ({ds.num_events()} events) to {args.out}")


def cmd_prepare_data(args):
    ds = dataio.truncate(dataio.load_dataset(args.inp), args.max_len)
    splits = dataio.make_splits(ds, dataio.SplitSpec(fold=args.fold, seed=args.seed))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in zip(("train", "val", "test"), splits):
        dataio.save_dataset(part, out / f"{name}{dataio.SUFFIX}")
    _write_json(dataio.dataset_stats(splits[0]).to_dict(), out / "stats.json")
    print(f"train/val/test = {len(splits[0])}/{len(splits[1])}/{len(splits[2])} in {out}")


def _train_and_save(cfg, train_path, val_path, out_dir):
    tr, va = dataio.load_dataset(train_path), dataio.load_dataset(val_path)
    data = {"train": str(Path(train_path).resolve()), "val": str(Path(val_path).resolve())}
    res = train(cfg, tr, va, data=data)
    final = evaluate(res.model, va, cfg.eval_batch_size, cfg.eval_mc_samples, cfg.seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(res.checkpoint, out / "checkpoint.json")
    write_runlog(res.runlog + [{"final": final.to_dict()}], out / "runlog.jsonl")
    write_runlog(res.timings, out / "timing.jsonl")
    aborted = [e["aborted"] for e in res.runlog if "aborted" in e]
    if aborted:
        raise NumericalError(f"training aborted ({aborted[0]}); kept the last good checkpoint")
    return res, final


def cmd_train(args):
    cfg = _load_config(args.config)
    res, final = _train_and_save(cfg, args.train, args.val, args.out_dir)
    print(f"best epoch {res.checkpoint['epoch']}: validation NLL/time {final.nll_per_time:.6f}")


def cmd_evaluate(args):
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    cfg = TrainConfig.from_dict(ckpt["config"])
    ds = dataio.load_dataset(args.data)
    report = evaluate(model, ds, cfg.eval_batch_size, cfg.eval_mc_samples, cfg.seed)
    _write_json(report.to_dict(), args.out)
    print(report.to_json())


def cmd_probe(args):
    cfg = _load_config(args.config)
    if cfg.decoder == "cp":
        raise ValidationError("the probe compares CP against a TPP; configure a non-CP decoder")
    d = Path(args.data_dir)
    paths = {k: d / f"{k}{dataio.SUFFIX}" for k in ("train", "val", "test")}
    for p in paths.values():
        if not p.exists():
            raise ValidationError(f"{p}: missing (run prepare-data first)")
    test = dataio.load_dataset(paths["test"])
    reports = {}
    for tag, dec in (("cp", "cp"), ("model", cfg.decoder)):
        sub = TrainConfig.from_dict({**cfg.to_dict(), "decoder": dec})
        res, _ = _train_and_save(sub, paths["train"], paths["val"], Path(args.out).parent / f"probe-{tag}")
        reports[tag] = evaluate(res.model, test, sub.eval_batch_size, sub.eval_mc_samples, sub.seed)
    report = time_independence_probe(reports["cp"], reports["model"], args.margin)
    _write_json(report.to_dict(), args.out)
    print(report.to_json())


def _sequence(ckpt, args):
    path = args.data or ckpt.get("data", {}).get("val")
    if not path:
        raise ValidationError("no dataset recorded in the checkpoint; pass --data")
    ds = dataio.load_dataset(path)
    if not 0 <= args.sequence_index < len(ds):
        raise ValidationError(f"--sequence-index must lie in [0, {len(ds)})")
    return ds.sequences[args.sequence_index]


def cmd_dump_intensity(args):
    if args.grid < 2:
        raise ValidationError("--grid needs at least 2 points")
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    seq = _sequence(ckpt, args)
    grid = np.linspace(seq.window[0], seq.window[1], args.grid)
    lam = model.intensity_on_grid(seq, grid)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time"] + [f"lambda_{m}" for m in range(model.num_marks)])
        for t, row in zip(grid, lam):
            w.writerow([repr(float(t))] + [repr(float(x)) for x in row])
    print(f"wrote {len(grid)} rows to {args.out}")


def cmd_dump_attention(args):
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    seq = _sequence(ckpt, args)
    batch = Batch.from_sequences([seq], model.num_marks)
    out = model.interval_outputs(batch, samples=1)
    rows = []
    for layer, coeff in enumerate(out.attention.get("encoder", [])):
        for h in range(coeff.shape[1]):
            for i, j in zip(*np.nonzero(np.ones(coeff.shape[2:], dtype=bool))):
                rows.append(("encoder", layer, h, i, j, coeff[0, h, i, j]))
    if "decoder" in out.attention:
        coeff = out.attention["decoder"]
        for h in range(coeff.shape[1]):
            for i, j in zip(*np.nonzero(np.ones(coeff.shape[2:], dtype=bool))):
                rows.append(("decoder", 0, h, i, j, coeff[0, h, i, j]))
    if not rows:
        raise ValidationError("this model has no attention layers")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "layer", "head", "query", "key", "coefficient"])
        for r in rows:
            w.writerow(list(r[:5]) + [repr(float(r[5]))])
    print(f"wrote {len(rows)} coefficients to {args.out}")


def build_parser():
    p = argparse.ArgumentParser(prog="tppkit", description="Neural temporal point process toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate-hawkes", help="simulate a Hawkes benchmark file")
    s.add_argument("--preset", choices=sorted(hawkes.PRESETS), required=True)
    s.add_argument("--sequences", type=int, default=2048)
    s.add_argument("--window", type=float, nargs=2, default=[0.0, 100.0], metavar=("A", "B"))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_simulate_hawkes)

    s = sub.add_parser("prepare-data", help="truncate and split a dataset file")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--fold", type=int, default=0)
    s.add_argument("--max-len", type=int, default=400)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(fn=cmd_prepare_data)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config", required=True)
    s.add_argument("--train", required=True)
    s.add_argument("--val", required=True)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("probe", help="time-independence probe (CP versus the configured TPP)")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--margin", type=float, default=0.02)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_probe)

    s = sub.add_parser("dump-intensity", help="per-mark intensity on a uniform time grid (CSV)")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--sequence-index", type=int, required=True)
    s.add_argument("--grid", type=int, default=1000)
    s.add_argument("--data", help="dataset file (defaults to the checkpoint's validation file)")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_dump_intensity)

    s = sub.add_parser("dump-attention", help="attention coefficients for one sequence (CSV)")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--sequence-index", type=int, required=True)
    s.add_argument("--data", help="dataset file (defaults to the checkpoint's validation file)")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_dump_attention)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
