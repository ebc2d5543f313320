import csv
import json

import pytest

from tppkit.cli import main


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    raw = root / "hawkes.tpp.json"
    assert main(["simulate-hawkes", "--preset", "dependent", "--sequences", "40",
                 "--window", "0", "50", "--seed", "1", "--out", str(raw)]) == 0
    assert main(["prepare-data", "--in", str(raw), "--fold", "0", "--max-len", "400",
                 "--seed", "0", "--out-dir", str(root / "data")]) == 0
    return root


def write_config(path, **kw):
    cfg = dict(encoder="sa", decoder="attn-mc", max_epochs=2, warmup_epochs=1, batch_size=16,
               mc_samples=5, eval_mc_samples=10)
    cfg.update(kw)
    path.write_text(json.dumps(cfg))
    return path


def run_train(root, name, **kw):
    cfg = write_config(root / f"{name}.json", **kw)
    out = root / name
    code = main(["train", "--config", str(cfg), "--train", str(root / "data/train.tpp.json"),
                 "--val", str(root / "data/val.tpp.json"), "--out-dir", str(out)])
    return code, out


def test_prepare_data_outputs(prepared):
    data = prepared / "data"
    for name in ("train", "val", "test"):
        assert (data / f"{name}.tpp.json").exists()
    stats = json.loads((data / "stats.json").read_text())
    assert stats["beta_hat"] > 0 and sum(stats["length_histogram"].values()) == 32


def test_train_evaluate_and_dumps(prepared):
    code, out = run_train(prepared, "run")
    assert code == 0
    log = [json.loads(x) for x in (out / "runlog.jsonl").read_text().splitlines()]
    assert [e["epoch"] for e in log[:-1]] == [1, 2] and "final" in log[-1]
    assert len((out / "timing.jsonl").read_text().splitlines()) == 2
    report = prepared / "report.json"
    assert main(["evaluate", "--checkpoint", str(out / "checkpoint.json"),
                 "--data", str(prepared / "data/test.tpp.json"), "--out", str(report)]) == 0
    rep = json.loads(report.read_text())
    assert rep["nll_per_time"] > 0 and 0 <= rep["weighted_f1"] <= 1

    grid_csv = prepared / "lam.csv"
    assert main(["dump-intensity", "--checkpoint", str(out / "checkpoint.json"),
                 "--sequence-index", "0", "--grid", "50", "--out", str(grid_csv)]) == 0
    rows = list(csv.reader(grid_csv.open()))
    assert rows[0] == ["time", "lambda_0", "lambda_1"] and len(rows) == 51
    assert all(float(v) > 0 for r in rows[1:] for v in r[1:])

    att_csv = prepared / "att.csv"
    assert main(["dump-attention", "--checkpoint", str(out / "checkpoint.json"),
                 "--sequence-index", "1", "--data", str(prepared / "data/test.tpp.json"),
                 "--out", str(att_csv)]) == 0
    rows = list(csv.DictReader(att_csv.open()))
    assert {r["source"] for r in rows} == {"encoder", "decoder"}
    assert all(0.0 <= float(r["coefficient"]) <= 1.0 for r in rows)


def test_train_is_deterministic_and_seed_env_overrides(prepared, monkeypatch):
    _, a = run_train(prepared, "det_a", encoder="gru", decoder="mlp-cm")
    _, b = run_train(prepared, "det_b", encoder="gru", decoder="mlp-cm")

    def logged(d):
        return [json.loads(x) for x in (d / "runlog.jsonl").read_text().splitlines()]

    def ckpt(d):
        c = json.loads((d / "checkpoint.json").read_text())
        c.pop("data")
        return c

    assert logged(a) == logged(b) and ckpt(a) == ckpt(b)
    monkeypatch.setenv("TPPKIT_SEED", "5")
    _, c = run_train(prepared, "det_c", encoder="gru", decoder="mlp-cm")
    assert ckpt(c)["config"]["seed"] == 5 and logged(c) != logged(a)
    monkeypatch.setenv("TPPKIT_SEED", "five")
    code, _ = run_train(prepared, "det_d")
    assert code == 2


def test_validation_exit_codes(prepared, tmp_path):
    bad = tmp_path / "bad.tpp.json"
    bad.write_text('{"num_marks": 2, "task": "multi-class", "sequences": [{"window": [0, 1], '
                   '"events": [{"time": 5.0, "labels": [0]}]}]}')
    assert main(["prepare-data", "--in", str(bad), "--out-dir", str(tmp_path / "o")]) == 2
    assert main(["prepare-data", "--in", str(tmp_path / "missing.json"),
                 "--out-dir", str(tmp_path / "o")]) == 2
    code, _ = run_train(prepared, "unknown_key", bogus=1)
    assert code == 2
    code, _ = run_train(prepared, "bad_decoder", decoder="nope")
    assert code == 2
    assert main(["simulate-hawkes", "--preset", "dependent", "--window", "5", "1",
                 "--out", str(tmp_path / "x.tpp.json")]) == 2
    cfg = write_config(tmp_path / "cp.json", decoder="cp")
    assert main(["probe", "--data-dir", str(prepared / "data"), "--config", str(cfg),
                 "--out", str(tmp_path / "p.json")]) == 2


def test_numerical_failure_exit_code(prepared, monkeypatch):
    import tppkit.training as training
    from tppkit.errors import NumericalError

    real = training.batch_nll_per_time
    calls = {"n": 0}

    def flaky(*a, **kw):
        calls["n"] += 1
        if calls["n"] > 3:
            raise NumericalError("injected NaN loss")
        return real(*a, **kw)

    monkeypatch.setattr(training, "batch_nll_per_time", flaky)
    code, out = run_train(prepared, "diverge", encoder="gru", decoder="cp", max_epochs=3)
    assert code == 3
    log = [json.loads(x) for x in (out / "runlog.jsonl").read_text().splitlines()]
    assert log[0]["epoch"] == 1 and log[1] == {"epoch": 2, "aborted": "injected NaN loss"}
    assert json.loads((out / "checkpoint.json").read_text())["epoch"] == 1


def test_probe_writes_report(prepared):
    cfg = write_config(prepared / "probe.json", encoder="gru", decoder="mlp-mc", max_epochs=1)
    out = prepared / "probe" / "report.json"
    assert main(["probe", "--data-dir", str(prepared / "data"), "--config", str(cfg),
                 "--margin", "0.02", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["verdict"] in ("suspect", "suitable") and rep["margin"] == 0.02
    assert (prepared / "probe" / "probe-cp" / "checkpoint.json").exists()
