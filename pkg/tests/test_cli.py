import json
import subprocess
import sys

import pytest

from lambdafraud.cli import COMMANDS, read_config, run_demo, run_subcommand
from lambdafraud.datagen import Dataset


@pytest.mark.parametrize("cmd", sorted(COMMANDS))
def test_help_exits_zero(cmd, capsys):
    assert run_subcommand([cmd, "--help"]) == 0
    assert "usage" in capsys.readouterr().out


def test_usage_errors_exit_two(tmp_path):
    assert run_subcommand(["generate", "--out", str(tmp_path / "d"), "--bogus"]) == 2
    assert run_subcommand(["generate"]) == 2  # --out missing
    assert run_subcommand(["bench", "--hops", "3"]) == 2
    assert run_subcommand([]) == 2


def test_runtime_failure_exits_one(tmp_path):
    assert run_subcommand(["transform", "--in", str(tmp_path / "nope"), "--out", str(tmp_path / "g")]) == 1
    (tmp_path / "junk").write_bytes(b"not a dataset")
    assert run_subcommand(["transform", "--in", str(tmp_path / "junk"), "--out", str(tmp_path / "g")]) == 1


def test_read_config(tmp_path):
    (tmp_path / "c").write_text("# comment\nmax-history = 7  # inline\n\ntrain.lr=0.5\n")
    assert read_config(tmp_path / "c") == {"max_history": "7", "train.lr": "0.5"}


def _gen(tmp_path, *flags):
    out = tmp_path / "d.lfds"
    assert run_subcommand(["generate", "--out", str(out), "--rings", "1", "--ring-size", "5", *flags]) == 0
    return len(Dataset.load(out))


def test_config_precedence(tmp_path, monkeypatch):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("n_transactions = 400\nn-days = 10\n")
    assert _gen(tmp_path, "--config", str(cfg)) == 400
    cfg.write_text("n_transactions = 400\ngenerate.n_transactions = 300\nn-days = 10\n")
    assert _gen(tmp_path, "--config", str(cfg)) == 300
    assert _gen(tmp_path, "--config", str(cfg), "--n-transactions", "200") == 200
    monkeypatch.setenv("LAMBDAFRAUD_CONFIG", str(cfg))
    assert _gen(tmp_path) == 300
    monkeypatch.delenv("LAMBDAFRAUD_CONFIG")
    # built-in default
    assert _gen(tmp_path, "--n-days", "30") == 10000


def test_bad_config_value_is_usage_error(tmp_path):
    (tmp_path / "c").write_text("n_transactions = many\n")
    assert run_subcommand(["generate", "--out", str(tmp_path / "d"), "--config", str(tmp_path / "c")]) == 2


@pytest.fixture(scope="module")
def demo_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("demo")
    run_demo(out, seed=3, n_transactions=2000, max_epochs=3, requests=100)
    return out


def test_demo_writes_every_artifact(demo_dir):
    names = {p.name for p in demo_dir.iterdir()}
    for n in ("dataset.lfds", "graph.lftd", "encoder.lfgb", "baseline.lfgb", "lnn.lfnn", "store.lfes",
              "responses.jsonl", "labels.txt", "eval.json", "baseline_eval.json", "bench.json"):
        assert n in names
    ev = json.loads((demo_dir / "eval.json").read_text())
    assert 0 <= ev["average_precision"] <= 1 and ev["n_pos"] > 0
    bench = json.loads((demo_dir / "bench.json").read_text())
    assert bench["graph_accesses"]["rt"] == 0
    n_resp = len((demo_dir / "responses.jsonl").read_text().splitlines())
    assert n_resp == len((demo_dir / "labels.txt").read_text().splitlines()) == ev["n_pos"] + ev["n_neg"]


def test_rt_infer_from_jsonl_requests(demo_dir, tmp_path):
    from lambdafraud.graph import TDGraph
    from lambdafraud.serving import request_for

    td = TDGraph.load(demo_dir / "graph.lftd")
    reqs = tmp_path / "r.jsonl"
    reqs.write_text("".join(json.dumps(request_for(td, r).to_json()) + "\n" for r in range(5)))
    code = run_subcommand(["rt-infer", "--store", str(demo_dir / "store.lfes"), "--lnn", str(demo_dir / "lnn.lfnn"),
                           "--encoder", str(demo_dir / "encoder.lfgb"), "--requests", str(reqs),
                           "--out", str(tmp_path / "o.jsonl")])
    assert code == 0
    lines = [json.loads(l) for l in (tmp_path / "o.jsonl").read_text().splitlines()]
    assert [l["txn_id"] for l in lines] == [int(td.data.txn_id[r]) for r in range(5)]


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "lambdafraud.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "generate" in r.stdout
