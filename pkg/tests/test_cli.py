import csv
import json

import pytest

from medtimeline import cli


def _ok(*argv):
    assert cli.run([str(a) for a in argv]) == 0


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    _ok("synth", "--seed", 1, "--patients", 300, "--out", d / "data")
    _ok("build-vocab", "--records", d / "data/records.jsonl", "--out", d / "vocab")
    for subset in ("train", "test"):
        _ok("tokenize", "--records", d / "data/records.jsonl", "--vocab-dir", d / "vocab", "--subset", subset,
            "--out", d / f"{subset}.tok", "--context-len", 64)
    return d


def test_split_is_ninety_ten(workdir):
    parts = [line.split("\t")[1] for line in (workdir / "vocab/split.tsv").read_text().splitlines()]
    assert abs(parts.count("test") / len(parts) - 0.1) < 0.02


def test_train_simulate_eval(workdir, capsys):
    cfg = workdir / "train.cfg"
    cfg.write_text("layers = 1\nd-model = 16\nheads = 2\ncontext-len = 64\nsteps = 20\nbatch-size = 4\n")
    _ok("--config", cfg, "train", "--tokens", workdir / "train.tok", "--vocab-dir", workdir / "vocab",
        "--out", workdir / "run")
    snap = json.loads((workdir / "run/train.config.json").read_text())
    assert snap["steps"] == 20 and snap["d_model"] == 16 and "version" in snap
    assert len((workdir / "run/loss.csv").read_text().splitlines()) == 21
    _ok("simulate", "--checkpoint", workdir / "run/model.ckpt", "--vocab-dir", workdir / "vocab",
        "--records", workdir / "data/records.jsonl", "--tokens", workdir / "test.tok", "--out", workdir / "sim",
        "--n", 4, "--d", 30, "--tau", "30d", "--limit", 5, "--sliding")
    rows = list(csv.DictReader(open(workdir / "sim/probabilities.csv")))
    assert 0 < len(rows) <= 5
    assert set(rows[0]) == {"patient_id", "target", "tau", "value", "numerator", "denominator"}
    capsys.readouterr()
    if any(r["value"] for r in rows):
        _ok("eval", "--probabilities", workdir / "sim/probabilities.csv", "--labels", workdir / "sim/labels.csv",
            "--out", workdir / "eval", "--bins", 2)
        assert "ece" in capsys.readouterr().out
        assert (workdir / "eval/metrics.json").exists()


def test_baseline(workdir, capsys):
    _ok("baseline", "--vocab-dir", workdir / "vocab", "--records", workdir / "data/records.jsonl",
        "--train-tokens", workdir / "train.tok", "--tokens", workdir / "test.tok", "--out", workdir / "bl",
        "--tau", "365d")
    assert "held-out patients" in capsys.readouterr().out
    assert (workdir / "bl/baseline.txt").exists()


def test_sweep_and_fit(workdir):
    _ok("sweep", "--tokens", workdir / "train.tok", "--vocab-dir", workdir / "vocab", "--out", workdir / "sw",
        "--budgets", "2e9", "--widths", "8,16,24", "--layers", 1, "--heads", 2, "--context-len", 32,
        "--batch-size", 2, "--warmup", 1)
    lines = (workdir / "sw/sweep.csv").read_text().splitlines()
    assert len(lines) >= 2


def test_error_codes(tmp_path, capsys):
    assert cli.run(["train", "--tokens", str(tmp_path / "nope.tok"), "--vocab-dir", str(tmp_path), "--out", str(tmp_path)]) == 3
    err = capsys.readouterr().err
    assert err.startswith("error code=missing-file message=") and err.count("\n") == 1
    assert cli.run(["bogus"]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense = 1\n")
    assert cli.run(["--config", str(bad), "synth", "--out", str(tmp_path)]) == 2
    bad.write_text('{"schema":99}\n')
    assert cli.run(["build-vocab", "--records", str(bad), "--out", str(tmp_path / "v")]) == 4


def test_parse_duration():
    assert cli.parse_duration("730d") == 730 * 86400
    assert cli.parse_duration("6mo") == pytest.approx(182.625 * 86400)
    assert cli.parse_duration("90") == 90
    with pytest.raises(Exception):
        cli.parse_duration("soon")
