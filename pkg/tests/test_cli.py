import csv
import json
from pathlib import Path

import numpy as np
import pytest

from amlrec.cli import build_parser, main
from amlrec.gplvm import TrainConfig
from amlrec.perf_matrix import read_matrix

DATA = Path(__file__).parent / "data"


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthetic matrix, a test split, and a briefly trained model."""
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--out-dir", root / "synth", "--n-pipelines", 40, "--n-datasets", 12,
               "--q-true", 2, "--missing", 0.1, "--surface", "nonlinear", "--seed", 3) == 0
    matrix = root / "synth" / "matrix.csv"
    assert run("select-test", "--out-dir", root / "split", "--matrix", matrix, "--n-test", 3,
               "--trials", 5, "--iters", 20) == 0
    test_file = root / "split" / "test_datasets.txt"
    assert run("train", "--out-dir", root / "model", "--matrix", matrix, "--exclude", test_file,
               "--q", 2, "--optimizer", "adam", "--epochs", 5) == 0
    return root, matrix, test_file, root / "model" / "model.json"


def test_documented_defaults():
    parser = build_parser()
    train = parser.parse_args(["train", "--out-dir", "x", "--matrix", "m"])
    assert (train.q, train.batch, train.epochs, train.optimizer) == (20, 50, 300, "sgd")
    assert TrainConfig(optimizer=train.optimizer, learning_rate=train.lr).lr == 1e-7
    sel = parser.parse_args(["select-test", "--out-dir", "x", "--matrix", "m", "--n-test", "1"])
    assert (sel.iters, sel.trials) == (300, 100)
    sim = parser.parse_args(
        ["simulate", "--out-dir", "x", "--model", "a", "--matrix", "m", "--test-datasets", "t"]
    )
    assert (sim.warm, sim.xi) == (5, 0.01)


def test_synth_dense_when_nothing_missing(tmp_path):
    assert run("synth", "--out-dir", tmp_path, "--n-pipelines", 10, "--n-datasets", 4,
               "--missing", 0) == 0
    assert read_matrix(tmp_path / "matrix.csv").density == 1.0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["command"] == "synth" and "matrix.csv" in manifest["outputs"]


def test_train_smoke_and_byte_identical(tmp_path):
    matrix = tmp_path / "m.csv"
    matrix.write_text(",a,b,c\np0,0.1,0.5,0.3\np1,0.4,0.2,0.9\np2,0.8,0.7,0.6\n"
                      "p3,0.3,0.3,0.1\np4,0.5,0.9,0.4\n")
    for out in ("one", "two"):
        assert run("train", "--out-dir", tmp_path / out, "--matrix", matrix, "--q", 2,
                   "--epochs", 1) == 0
    a = (tmp_path / "one" / "model.json").read_bytes()
    assert a == (tmp_path / "two" / "model.json").read_bytes()
    assert json.loads(a)["meta"]["epochs_run"] == 1


def test_usage_errors_exit_2(tmp_path, workspace):
    root, matrix, test_file, model = workspace
    assert run("train", "--out-dir", tmp_path, "--matrix", tmp_path / "missing.csv") == 2
    assert run("train", "--out-dir", tmp_path, "--matrix", matrix, "--q", "abc") == 2
    assert run("bogus") == 2
    bad = tmp_path / "bad.txt"
    bad.write_text("no-such-dataset\n")
    assert run("simulate", "--out-dir", tmp_path, "--model", model, "--matrix", matrix,
               "--test-datasets", bad, "--budget", 3) == 2


def test_training_failure_exit_1(tmp_path, workspace):
    _, matrix, _, _ = workspace
    assert run("train", "--out-dir", tmp_path, "--matrix", matrix, "--q", 2,
               "--optimizer", "sgd", "--lr", 1e6, "--epochs", 3) == 1


def test_budget_zero(tmp_path, workspace):
    _, matrix, test_file, model = workspace
    assert run("simulate", "--out-dir", tmp_path, "--model", model, "--matrix", matrix,
               "--test-datasets", test_file, "--budget", 0) == 0
    for f in (tmp_path / "traces").glob("*.jsonl"):
        for line in f.read_text().splitlines():
            assert json.loads(line)["n_steps"] == 0
    rows = list(csv.reader(open(tmp_path / "curves.csv")))
    assert rows == [["method", "iteration", "metric", "value", "stderr"]]


def test_simulate_curves_equal_recomputation(tmp_path, workspace):
    _, matrix, test_file, model = workspace
    sim = tmp_path / "sim"
    assert run("simulate", "--out-dir", sim, "--model", model, "--matrix", matrix,
               "--test-datasets", test_file, "--budget", 8, "--warm", 2, "--seeds", 2) == 0
    assert {p.stem for p in (sim / "traces").glob("*.jsonl")} == {
        "pmf-ei", "pmf-greedy", "random", "random2x", "random4x"}
    ev = tmp_path / "eval"
    assert run("eval", "--out-dir", ev, "--traces", sim / "traces", "--matrix", matrix,
               "--model", model) == 0
    assert (ev / "curves.csv").read_bytes() == (sim / "curves.csv").read_bytes()


def test_simulate_rerun_and_replay(tmp_path, workspace):
    _, matrix, test_file, model = workspace
    args = ["simulate", "--model", model, "--matrix", matrix, "--test-datasets", test_file,
            "--budget", 6, "--methods", "pmf-ei,random", "--svg"]
    assert run(*args, "--out-dir", tmp_path / "a") == 0
    assert run(*args, "--out-dir", tmp_path / "b") == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert Path("regret.svg") in files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    manifest = tmp_path / "a" / "manifest.json"
    assert run("replay", manifest, "--out-dir", tmp_path / "r") == 0


def test_replay_detects_changed_input(tmp_path):
    matrix = tmp_path / "m.csv"
    assert run("synth", "--out-dir", tmp_path / "s", "--n-pipelines", 12, "--n-datasets", 6) == 0
    matrix.write_bytes((tmp_path / "s" / "matrix.csv").read_bytes())
    assert run("select-test", "--out-dir", tmp_path / "t", "--matrix", matrix, "--n-test", 2,
               "--trials", 3, "--iters", 5) == 0
    assert run("replay", tmp_path / "t" / "manifest.json") == 0
    with open(matrix, "a") as fh:
        fh.write("\n")  # same scores, different bytes
    assert run("replay", tmp_path / "t" / "manifest.json") == 2


def test_eval_golden(tmp_path):
    assert run("eval", "--out-dir", tmp_path, "--traces", DATA / "traces",
               "--matrix", DATA / "golden_matrix.csv") == 0
    got = list(csv.DictReader(open(tmp_path / "curves.csv")))
    want = list(csv.DictReader(open(DATA / "golden_curves.csv")))
    assert [(r["method"], r["iteration"], r["metric"]) for r in got] == [
        (r["method"], r["iteration"], r["metric"]) for r in want]
    for g, w in zip(got, want):
        for key in ("value", "stderr"):
            assert float(g[key]) == pytest.approx(float(w[key]), abs=1e-12)


def test_threads_env(tmp_path, monkeypatch):
    monkeypatch.setenv("AMLREC_THREADS", "2")
    assert run("synth", "--out-dir", tmp_path, "--n-pipelines", 8, "--n-datasets", 4) == 0
    monkeypatch.setenv("AMLREC_THREADS", "zero")
    assert run("synth", "--out-dir", tmp_path, "--n-pipelines", 8, "--n-datasets", 4) == 2
    assert np.isfinite(read_matrix(tmp_path / "matrix.csv").to_dense()).all()
