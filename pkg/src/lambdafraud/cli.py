"""Command-line entry point: ``lambdafraud <subcommand> [flags]``.

Config file format: one ``key = value`` per line, ``#`` starts a comment.
Keys are flag names without the leading dashes (``max-history`` and
``max_history`` are equivalent). A key may be scoped to one subcommand as
``train.lr = 0.01``; unscoped keys apply to every subcommand that has the
flag. The file comes from ``--config`` or, failing that, from the
``LAMBDAFRAUD_CONFIG`` environment variable. Precedence: flag > scoped key >
unscoped key > built-in default.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger("lambdafraud")

CONFIG_ENV = "LAMBDAFRAUD_CONFIG"
_REQUIRED = object()


class UsageError(Exception):
    pass


def read_config(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


# -- parser construction ------------------------------------------------------------


class _Sub:
    """Records built-in defaults so config values can slot in beneath explicit flags."""

    def __init__(self, parser: argparse.ArgumentParser):
        self.p = parser
        self.defaults: dict[str, object] = {}
        self.types: dict[str, Callable] = {}

    def opt(self, flag: str, default=_REQUIRED, type: Callable = str, help: str = "", **kw):
        dest = flag.lstrip("-").replace("-", "_")
        self.defaults[dest] = default
        self.types[dest] = type
        shown = "required" if default is _REQUIRED else f"default: {default}"
        self.p.add_argument(flag, dest=dest, type=type, default=None, help=f"{help} ({shown})".strip(), **kw)

    def flag(self, flag: str, help: str = ""):
        dest = flag.lstrip("-").replace("-", "_")
        self.defaults[dest] = False
        self.types[dest] = _as_bool
        self.p.add_argument(flag, dest=dest, action="store_const", const=True, default=None, help=help)


def _as_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {v!r}")


def _hops(v: str) -> int:
    h = int(v)
    if h not in (2, 4, 6):
        raise argparse.ArgumentTypeError("hops must be 2, 4 or 6")
    return h


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, _Sub]]:
    ap = argparse.ArgumentParser(prog="lambdafraud", description="Leakage-safe graph fraud scoring pipeline.")
    ap.add_argument("--config", help=f"key = value config file (default: ${CONFIG_ENV})")
    ap.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sp = ap.add_subparsers(dest="command", metavar="<command>")
    subs: dict[str, _Sub] = {}

    def sub(name: str, help: str) -> _Sub:
        s = _Sub(sp.add_parser(name, help=help, description=help))
        s.p.add_argument("--config", dest="sub_config", default=None, help="key = value config file")
        subs[name] = s
        return s

    s = sub("generate", "Write a seeded synthetic transaction dataset.")
    s.opt("--out", help="dataset file (.jsonl for text, anything else binary)")
    s.opt("--seed", 0, int)
    s.opt("--n-transactions", 10000, int)
    s.opt("--n-days", 60, int)
    s.opt("--fraud-ratio", 0.025, float)
    s.opt("--rings", 8, int, "number of fraud rings")
    s.opt("--ring-size", 20, int)
    s.opt("--feature-dim", 16, int)

    s = sub("transform", "Build the time-partitioned graph from a dataset.")
    s.opt("--in", help="dataset file")
    s.opt("--out", help="graph file")
    s.opt("--max-history", 30, int, "reference window in days")
    s.opt("--node-budget", 2048, int, "mini-batch node budget")
    s.opt("--seed", 0, int, "seed for the train/validation split")

    s = sub("train-encoder", "Train the GBDT encoder (or the stand-alone baseline with --baseline).")
    s.opt("--in", help="dataset or graph file")
    s.opt("--out", help="encoder checkpoint")
    s.opt("--trees", 64, int)
    s.opt("--depth", 4, int)
    s.opt("--seed", 0, int)
    s.flag("--baseline", "train the larger early-stopped scorer instead")
    s.opt("--early-stopping", 32, int, "patience in trees for --baseline")

    s = sub("train", "Train the lambda network on a graph.")
    s.opt("--graph", help="graph file")
    s.opt("--encoder", help="encoder checkpoint")
    s.opt("--out", help="network checkpoint")
    s.opt("--hidden", 64, int)
    s.opt("--layers", 4, int)
    s.opt("--lr", 0.001, float)
    s.opt("--max-epochs", 128, int)
    s.opt("--patience", 16, int)
    s.opt("--node-budget", 2048, int)
    s.opt("--seed", 0, int)

    s = sub("batch-infer", "Compute entity embeddings for every partition and flush them to a store.")
    s.opt("--graph", help="graph file")
    s.opt("--lnn", help="network checkpoint")
    s.opt("--encoder", help="encoder checkpoint")
    s.opt("--store", help="output store file")

    s = sub("rt-infer", "Score line-delimited requests from the embedding store.")
    s.opt("--store", help="store file")
    s.opt("--lnn", help="network checkpoint")
    s.opt("--encoder", help="encoder checkpoint")
    s.opt("--requests", help="JSONL requests, or a graph file to replay its test split")
    s.opt("--out", "-", str, "JSONL responses ('-' for stdout)")
    s.opt("--labels-out", "", str, "when replaying a graph, also write the labels here")

    s = sub("evaluate", "ROC AUC, AP and the PR curve for a score file.")
    s.opt("--scores", help="one score per line, or JSONL responses")
    s.opt("--labels", help="one 0/1 label per line")
    s.opt("--out", help="JSON report; the curve goes to <out>.pr.tsv")

    s = sub("bench", "Staged latency benchmark: GBDT baseline vs end-to-end vs RT path.")
    s.opt("--graph", help="graph file")
    s.opt("--lnn", help="network checkpoint")
    s.opt("--encoder", help="encoder checkpoint")
    s.opt("--baseline", "", str, "baseline GBDT checkpoint (defaults to the encoder)")
    s.opt("--store", help="store file")
    s.opt("--hops", 2, _hops)
    s.opt("--requests", 10000, int)
    s.opt("--seed", 0, int)
    s.opt("--graph-latency-us", 0.0, float, "synthetic latency per hop pair")
    s.opt("--jitter-us", 0.0, float)
    s.flag("--sleep", "block for the synthetic latency instead of adding it")
    s.opt("--out", help="JSON report")

    s = sub("demo", "Run the whole pipeline on a small seeded dataset.")
    s.opt("--seed", 7, int)
    s.opt("--out", help="output directory")
    s.opt("--n-transactions", 6000, int)
    s.opt("--max-epochs", 12, int)
    s.opt("--requests", 200, int, "bench requests")
    return ap, subs


def resolve(ns: argparse.Namespace, sub: _Sub, config: dict[str, str]) -> argparse.Namespace:
    """Fill unset flags from the config file, then from built-in defaults."""
    cmd = ns.command
    for dest, default in sub.defaults.items():
        if getattr(ns, dest) is not None:
            continue
        raw = config.get(f"{cmd}.{dest}", config.get(dest))
        if raw is not None:
            try:
                setattr(ns, dest, sub.types[dest](raw))
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config key {dest!r}: {exc}") from exc
        elif default is _REQUIRED:
            raise UsageError(f"{cmd}: --{dest.replace('_', '-')} is required")
        else:
            setattr(ns, dest, default)
    return ns


# -- subcommands ----------------------------------------------------------------------


def cmd_generate(a) -> None:
    from .datagen import DatasetConfig, generate_dataset

    cfg = DatasetConfig(n_transactions=a.n_transactions, n_days=a.n_days, fraud_ratio=a.fraud_ratio,
                        n_fraud_rings=a.rings, ring_size=a.ring_size, feature_dim=a.feature_dim, seed=a.seed)
    data = generate_dataset(cfg)
    if str(a.out).endswith(".jsonl"):
        data.to_jsonl(a.out)
    else:
        data.save(a.out)
    log.info("wrote %d transactions (%d fraud) to %s", len(data), int(data.label.sum()), a.out)


def cmd_transform(a) -> None:
    from .graph import transform, validate_leakage_freedom
    from .pipeline import load_any_dataset
    from .datagen import split_masks

    data, split = load_any_dataset(a.__dict__["in"])
    if split is None:
        split = split_masks(data.timestamp, seed=a.seed)
    td = transform(data, a.max_history, a.node_budget, split)
    report = validate_leakage_freedom(td)
    if not report.ok:
        raise RuntimeError(f"{len(report.violations)} leakage violations; first: {report.violations[0]}")
    td.ensure_communities()
    td.save(a.out)
    print(td.summary_table())
    log.info("wrote %d partitions to %s", len(td.partitions), a.out)


def cmd_train_encoder(a) -> None:
    from .pipeline import load_any_dataset, train_encoder

    data, split = load_any_dataset(a.__dict__["in"])
    model = train_encoder(data, split, a.trees, a.depth, a.seed, baseline=a.baseline,
                          early_stopping_rounds=a.early_stopping)
    model.save(a.out)
    log.info("wrote %d-tree encoder to %s", model.n_trees, a.out)


def cmd_train(a) -> None:
    from .encoder import GBDTModel
    from .graph import TDGraph
    from .nn import TrainConfig
    from .pipeline import train_lnn

    td = TDGraph.load(a.graph)
    enc = GBDTModel.load(a.encoder)
    cfg = TrainConfig(learning_rate=a.lr, max_epochs=a.max_epochs, patience=a.patience, hidden_dim=a.hidden,
                      n_batch_layers=a.layers, node_budget=a.node_budget, seed=a.seed)
    model, hist = train_lnn(td, enc, cfg)
    model.save(a.out)
    log.info("trained %d epochs, best validation loss %.5f; wrote %s", len(hist), model.meta["best_val_loss"], a.out)


def cmd_batch_infer(a) -> None:
    from .encoder import GBDTModel
    from .graph import TDGraph
    from .nn import LNNModel
    from .serving import batch_infer, pipeline_checksum, store_flush

    td, lnn, enc = TDGraph.load(a.graph), LNNModel.load(a.lnn), GBDTModel.load(a.encoder)
    manifest = store_flush(batch_infer(lnn, enc, td), a.store, pipeline_checksum(lnn, enc))
    log.info("flushed %d embeddings (refresh day %d) to %s", manifest["n_entries"], manifest["refresh_day"], a.store)


def cmd_rt_infer(a) -> None:
    from .encoder import GBDTModel
    from .graph import TDGraph
    from .nn import LNNModel
    from .pipeline import TEST, write_lines
    from .serving import RTScorer, read_requests, request_for, store_load

    lnn, enc = LNNModel.load(a.lnn), GBDTModel.load(a.encoder)
    store = store_load(a.store)
    scorer = RTScorer(lnn, enc, store)
    if Path(a.requests).read_bytes()[:4] == b"LFTD":
        td = TDGraph.load(a.requests)
        split = td.split if td.split is not None else np.full(len(td.data), TEST, np.int8)
        rows = np.nonzero(split == TEST)[0]
        reqs = [request_for(td, int(r)) for r in rows]
        if a.labels_out:
            write_lines(a.labels_out, td.data.label[rows].tolist())
    else:
        reqs = read_requests(a.requests)
    out = sys.stdout if a.out == "-" else open(a.out, "w")
    try:
        n_missing = 0
        for r in reqs:
            resp = scorer.score(r)
            n_missing += resp.missing_entities
            out.write(json.dumps(resp.to_json(), sort_keys=True) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    log.info("scored %d requests (%d missing entity lookups)", len(reqs), n_missing)


def cmd_evaluate(a) -> None:
    from .metrics import evaluate, write_report
    from .pipeline import read_labels, read_scores

    s, y = read_scores(a.scores), read_labels(a.labels)
    res = evaluate(s, y)
    write_report(res, a.out)
    print(json.dumps(res.report(), sort_keys=True))


def cmd_bench(a) -> None:
    from .bench import run_bench
    from .encoder import GBDTModel
    from .graph import TDGraph
    from .nn import LNNModel
    from .serving import store_load

    td, lnn, enc = TDGraph.load(a.graph), LNNModel.load(a.lnn), GBDTModel.load(a.encoder)
    base = GBDTModel.load(a.baseline) if a.baseline else enc
    store = store_load(a.store)
    rep = run_bench({"baseline_gbdt": base, "lnn": lnn, "encoder": enc}, store, td, a.requests, a.hops, a.seed,
                    graph_latency_us=a.graph_latency_us, jitter_us=a.jitter_us, sleep=a.sleep)
    rep.save(a.out)
    print(rep.table())


def cmd_demo(a) -> None:
    run_demo(Path(a.out), a.seed, a.n_transactions, a.max_epochs, a.requests)


def run_demo(out: Path, seed: int = 7, n_transactions: int = 6000, max_epochs: int = 12, requests: int = 200) -> dict:
    """Every stage on a small dataset; returns the file map written under ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    f = {k: out / v for k, v in {
        "dataset": "dataset.lfds", "graph": "graph.lftd", "encoder": "encoder.lfgb", "baseline": "baseline.lfgb",
        "lnn": "lnn.lfnn", "store": "store.lfes", "responses": "responses.jsonl", "labels": "labels.txt",
        "eval": "eval.json", "baseline_eval": "baseline_eval.json", "baseline_scores": "baseline_scores.txt",
        "bench": "bench.json",
    }.items()}
    n_days = max(10, n_transactions // 200)
    rings = max(1, n_transactions // 500)
    common = ["--log-level", logging.getLevelName(log.getEffectiveLevel())]
    steps = [
        ["generate", "--out", f["dataset"], "--seed", seed, "--n-transactions", n_transactions, "--n-days", n_days,
         "--rings", rings, "--ring-size", 10],
        ["transform", "--in", f["dataset"], "--out", f["graph"], "--seed", seed, "--node-budget", 1024],
        ["train-encoder", "--in", f["graph"], "--out", f["encoder"], "--trees", 32, "--seed", seed],
        ["train-encoder", "--in", f["graph"], "--out", f["baseline"], "--trees", 128, "--seed", seed, "--baseline"],
        ["train", "--graph", f["graph"], "--encoder", f["encoder"], "--out", f["lnn"], "--hidden", 32,
         "--layers", 2, "--max-epochs", max_epochs, "--patience", 4, "--node-budget", 1024, "--seed", seed],
        ["batch-infer", "--graph", f["graph"], "--lnn", f["lnn"], "--encoder", f["encoder"], "--store", f["store"]],
        ["rt-infer", "--store", f["store"], "--lnn", f["lnn"], "--encoder", f["encoder"], "--requests", f["graph"],
         "--out", f["responses"], "--labels-out", f["labels"]],
        ["evaluate", "--scores", f["responses"], "--labels", f["labels"], "--out", f["eval"]],
    ]
    for argv in steps:
        _run_step(common + [str(x) for x in argv])

    from .encoder import GBDTModel
    from .graph import TDGraph
    from .pipeline import TEST, write_lines

    td = TDGraph.load(f["graph"])
    rows = np.nonzero(td.split == TEST)[0]
    write_lines(f["baseline_scores"], GBDTModel.load(f["baseline"]).predict(td.data.features[rows]).tolist())
    for argv in (
        ["evaluate", "--scores", f["baseline_scores"], "--labels", f["labels"], "--out", f["baseline_eval"]],
        ["bench", "--graph", f["graph"], "--lnn", f["lnn"], "--encoder", f["encoder"], "--baseline", f["baseline"],
         "--store", f["store"], "--hops", 2, "--requests", requests, "--seed", seed, "--out", f["bench"]],
    ):
        _run_step(common + [str(x) for x in argv])
    lnn_ap = json.loads(f["eval"].read_text())["average_precision"]
    base_ap = json.loads(f["baseline_eval"].read_text())["average_precision"]
    log.info("demo done: test AP lnn %.4f vs baseline gbdt %.4f; outputs in %s", lnn_ap, base_ap, out)
    return f


def _run_step(argv: list[str]) -> None:
    code = run_subcommand(argv, _nested=True)
    if code != 0:
        raise RuntimeError(f"demo step {argv[2] if len(argv) > 2 else argv} failed with exit code {code}")


COMMANDS = {
    "generate": cmd_generate, "transform": cmd_transform, "train-encoder": cmd_train_encoder, "train": cmd_train,
    "batch-infer": cmd_batch_infer, "rt-infer": cmd_rt_infer, "evaluate": cmd_evaluate, "bench": cmd_bench,
    "demo": cmd_demo,
}


def run_subcommand(argv: Sequence[str] | None = None, _nested: bool = False) -> int:
    ap, subs = build_parser()
    try:
        ns = ap.parse_args(list(sys.argv[1:] if argv is None else argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    if not _nested:
        logging.basicConfig(stream=sys.stderr, level=ns.log_level, format="%(levelname)s %(name)s: %(message)s")
    else:
        log.setLevel(ns.log_level)
    if ns.command is None:
        ap.print_usage(sys.stderr)
        return 2
    try:
        cfg_path = ns.sub_config or ns.config or os.environ.get(CONFIG_ENV)
        config = read_config(cfg_path) if cfg_path else {}
        resolve(ns, subs[ns.command], config)
    except UsageError as exc:
        subs[ns.command].p.print_usage(sys.stderr)
        print(f"lambdafraud {ns.command}: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"lambdafraud: config file not found: {exc.filename}", file=sys.stderr)
        return 2
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            COMMANDS[ns.command](ns)
    except FileNotFoundError as exc:
        log.error("file not found: %s", exc.filename or exc)
        return 1
    except Exception as exc:  # noqa: BLE001 - every module failure maps to exit 1
        log.error("%s failed: %s: %s", ns.command, type(exc).__name__, exc)
        log.debug("traceback", exc_info=True)
        return 1
    return 0


def main() -> None:
    sys.exit(run_subcommand())


if __name__ == "__main__":
    main()
