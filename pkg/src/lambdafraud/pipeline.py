"""Glue used by the command line, the demos and the acceptance tests."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datagen import Dataset, DatasetConfig, generate_dataset, split_masks
from .encoder import GBDTModel, GBDTParams, train_gbdt
from .graph import TDGraph, transform
from .metrics import EvalResult, evaluate
from .nn import LNNModel, TrainConfig, build_train_batches, train
from .serving import e2e_scores

log = logging.getLogger(__name__)

TRAIN, VAL, TEST = 0, 1, 2


def train_encoder(data: Dataset, split: np.ndarray | None, n_trees: int = 64, max_depth: int = 4, seed: int = 0, *,
                  baseline: bool = False, early_stopping_rounds: int = 32) -> GBDTModel:
    """Feature-encoder GBDT on the training split.

    ``baseline=True`` gives the larger stand-alone scorer (validation early
    stopping); the encoder itself trains to a fixed number of trees.
    """
    if split is None:
        split = split_masks(data.timestamp, seed=seed)
    tr, va = split == TRAIN, split == VAL
    x, y = data.features, data.label
    if baseline and va.any():
        params = GBDTParams(n_trees=n_trees, max_depth=max_depth, seed=seed, early_stopping_rounds=early_stopping_rounds)
        return train_gbdt(x[tr], y[tr], params, val_features=x[va], val_labels=y[va])
    return train_gbdt(x[tr], y[tr], GBDTParams(n_trees=n_trees, max_depth=max_depth, seed=seed))


def train_lnn(td: TDGraph, encoder: GBDTModel, cfg: TrainConfig) -> tuple[LNNModel, list[dict]]:
    emb = encoder.encode(td.data.features)
    batches = build_train_batches(td, emb, cfg.node_budget, np.dtype(cfg.dtype))
    return train(None, batches, cfg, in_dim=encoder.n_trees)


def _split_of(td: TDGraph) -> np.ndarray:
    if td.split is None:
        return split_masks(td.data.timestamp)
    return td.split


def lnn_scores(lnn: LNNModel, encoder: GBDTModel, td: TDGraph, code: int | None = TEST) -> tuple[np.ndarray, np.ndarray]:
    """``(rows, scores)`` from the end-to-end path, restricted to one split code."""
    split = _split_of(td)
    rows, scores = [], []
    for p in td.partitions:
        tgt = p.node_ref[p.targets]
        if code is not None and not np.any(split[tgt] == code):
            continue
        r, s = e2e_scores(lnn, encoder, td, p)
        keep = np.ones(len(r), bool) if code is None else split[r] == code
        rows.append(r[keep])
        scores.append(s[keep])
    if not rows:
        return np.zeros(0, np.int64), np.zeros(0, np.float32)
    rows, scores = np.concatenate(rows), np.concatenate(scores)
    order = np.argsort(rows, kind="stable")
    return rows[order], scores[order]


@dataclass
class LiftResult:
    seed: int
    lnn: EvalResult
    encoder_only: EvalResult
    baseline: EvalResult

    @property
    def lift(self) -> float:
        return self.lnn.average_precision - self.encoder_only.average_precision


def lift_experiment(config: DatasetConfig, n_trees: int = 64, baseline_trees: int = 256,
                    cfg: TrainConfig | None = None, max_history: int = 30) -> LiftResult:
    """LNN vs GBDT test AP on one generated dataset (time-ordered split)."""
    cfg = cfg or TrainConfig(seed=config.seed)
    data = generate_dataset(config)
    td = transform(data, max_history, cfg.node_budget, split_masks(data.timestamp, seed=config.seed))
    enc = train_encoder(data, td.split, n_trees, seed=config.seed)
    base = train_encoder(data, td.split, baseline_trees, seed=config.seed, baseline=True)
    lnn, hist = train_lnn(td, enc, cfg)
    rows, s = lnn_scores(lnn, enc, td, TEST)
    y = data.label[rows]
    r = LiftResult(config.seed, evaluate(s, y), evaluate(enc.predict(data.features[rows]), y),
                   evaluate(base.predict(data.features[rows]), y))
    log.info("seed %d: lnn AP %.4f, encoder AP %.4f, baseline AP %.4f (%d epochs)",
             config.seed, r.lnn.average_precision, r.encoder_only.average_precision,
             r.baseline.average_precision, len(hist))
    return r


def write_lines(path: str | Path, values) -> None:
    with open(path, "w") as fh:
        for v in values:
            fh.write(f"{v!r}\n" if isinstance(v, float) else f"{v}\n")


def read_scores(path: str | Path) -> np.ndarray:
    """Plain one-number-per-line files, or JSONL with a ``score`` field."""
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            out.append(json.loads(line)["score"] if line.startswith("{") else float(line))
    return np.asarray(out, dtype=np.float64)


def read_labels(path: str | Path) -> np.ndarray:
    with open(path) as fh:
        return np.asarray([int(line) for line in fh if line.strip()], dtype=np.int64)


def load_any_dataset(path: str | Path) -> tuple[Dataset, np.ndarray | None]:
    """A dataset file, or a TD graph file (returns its data and split)."""
    raw = Path(path).read_bytes()[:4]
    if raw == b"LFTD":
        td = TDGraph.load(path)
        return td.data, td.split
    return Dataset.load(path), None
