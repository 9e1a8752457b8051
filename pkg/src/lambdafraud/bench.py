"""Staged latency benchmark: GBDT baseline, end-to-end graph inference, RT path.

Every request is timed per stage with a monotonic nanosecond clock. The
end-to-end path pays for a k-hop graph query (served in process, with an
optional synthetic service latency) before running the full network on the
retrieved subgraph; the RT path only reads the embedding store.
"""

from __future__ import annotations

import gc
import json
import platform
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .encoder import GBDTModel
from .graph import ENTITY, TARGET, InputError, Partition, TDGraph, graph_accesses
from .nn import LNNModel, forward, prepare
from .serving import DTYPE, EmbeddingStore, RTScorer, request_for

STAGES = ("graph_query", "feature_collection", "feature_encoding", "model_inference")
HOPS = (2, 4, 6)
MODELS = ("baseline_gbdt", "e2e", "rt")


def p99(samples) -> float:
    """Nearest-rank 99th percentile."""
    s = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    if not len(s):
        raise InputError("p99 of an empty sample")
    return float(s[-(-99 * len(s) // 100) - 1])


# -- records ------------------------------------------------------------------------------


@dataclass
class LatencyRecord:
    """Per-request stage durations in microseconds; absent stages are zero and flagged."""

    graph_query: float = 0.0
    feature_collection: float = 0.0
    feature_encoding: float = 0.0
    model_inference: float = 0.0
    absent: frozenset = frozenset()

    def __post_init__(self):
        self.absent = frozenset(self.absent)
        for s in self.absent:
            if s not in STAGES:
                raise ValueError(f"unknown stage {s!r}")
            if getattr(self, s) != 0.0:
                raise ValueError(f"absent stage {s} must be zero")

    def present(self, stage: str) -> bool:
        return stage not in self.absent

    @property
    def total(self) -> float:
        return sum(getattr(self, s) for s in STAGES if s not in self.absent)


@dataclass
class BenchReport:
    hops: int
    n_requests: int
    seed: int
    graph_latency_us: float
    stats: dict          # model -> stage|"total" -> {"avg", "p99", "present"}
    speedups: dict       # model -> stage|"total" -> {"avg", "p99"} as e2e / model
    graph_accesses: dict
    environment: str

    def to_json(self) -> dict:
        return {
            "hops": self.hops,
            "n_requests": self.n_requests,
            "seed": self.seed,
            "graph_latency_us": self.graph_latency_us,
            "stats": self.stats,
            "speedups": self.speedups,
            "graph_accesses": self.graph_accesses,
            "environment": self.environment,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    def table(self) -> str:
        """Text table: one row per stage, avg and p99 in ms per model, speedups in brackets."""
        head = f"{'stage':<20}" + "".join(f"{m + ' avg':>26}{m + ' p99':>26}" for m in MODELS)
        lines = [f"hops={self.hops} requests={self.n_requests}", head]
        for stage in STAGES + ("total",):
            row = f"{stage:<20}"
            for m in MODELS:
                st = self.stats[m][stage]
                for q in ("avg", "p99"):
                    if not st["present"]:
                        row += f"{'-':>26}"
                        continue
                    cell = f"{st[q] / 1e3:.3f}ms"
                    sp = self.speedups.get(m, {}).get(stage)
                    if sp is not None and m != "e2e":
                        cell += f" ({sp[q]:.2f}x)"
                    row += f"{cell:>26}"
            lines.append(row)
        return "\n".join(lines)


def summarize(records: list[LatencyRecord]) -> dict:
    out = {}
    for stage in STAGES:
        present = all(r.present(stage) for r in records)
        vals = [getattr(r, stage) for r in records]
        out[stage] = {"avg": float(np.mean(vals)), "p99": p99(vals), "present": present}
    totals = [r.total for r in records]
    out["total"] = {"avg": float(np.mean(totals)), "p99": p99(totals), "present": True}
    return out


def speedups(stats: dict, reference: str = "e2e") -> dict:
    ref = stats[reference]
    out = {}
    for m, st in stats.items():
        out[m] = {}
        for stage, v in st.items():
            if not (v["present"] and ref[stage]["present"]):
                continue
            out[m][stage] = {q: (ref[stage][q] / v[q] if v[q] > 0 else float("inf")) for q in ("avg", "p99")}
    return out


# -- graph query ----------------------------------------------------------------------------


def _expand(partition: Partition, target: int, hops: int) -> tuple[np.ndarray, np.ndarray]:
    if hops not in HOPS:
        raise InputError(f"hops must be one of {HOPS}")
    if not (0 <= target < partition.n_nodes) or partition.node_kind[target] != TARGET:
        raise InputError(f"node {target} is not a target of partition {partition.day}")
    adj = partition.skeleton()
    seen = np.zeros(partition.n_nodes, bool)
    seen[target] = True
    frontier = np.array([target])
    for _ in range(hops):
        nb = np.unique(adj[frontier].indices)
        nb = nb[~seen[nb]]
        seen[nb] = True
        frontier = nb
        if not len(frontier):
            break
    seen[target] = False
    reached = np.nonzero(seen)[0]
    is_ent = partition.node_kind[reached] == ENTITY
    return reached[~is_ent], reached[is_ent]


def khop_expand(partition: Partition, target: int, hops: int) -> np.ndarray:
    """Transactions reached by alternating txn-entity-txn steps, sorted local indices, target excluded."""
    return _expand(partition, target, hops)[0]


class SimulatedGraphService:
    """In-process stand-in for a graph database serving k-hop subgraph queries.

    Each hop pair of a query costs ``base_latency_us`` plus a seeded uniform
    jitter in ``[0, jitter_us)``. With ``sleep=False`` that cost is reported
    virtually (added to the measured traversal time); with ``sleep=True`` the
    service actually blocks for it.
    """

    def __init__(self, td: TDGraph, base_latency_us: float = 0.0, jitter_us: float = 0.0,
                 seed: int = 0, sleep: bool = False):
        if not td.partitions:
            raise InputError("no partitions to serve")
        self.td = td
        self.base_latency_us = float(base_latency_us)
        self.jitter_us = float(jitter_us)
        self.sleep = sleep
        self.rng = np.random.default_rng(seed)
        self.where: dict[int, tuple[int, int]] = {}
        for pi, p in enumerate(td.partitions):
            for loc in p.targets:
                self.where[int(p.node_ref[loc])] = (pi, int(loc))

    def latency_us(self, hops: int) -> float:
        pairs = hops // 2
        lat = self.base_latency_us * pairs
        if self.jitter_us > 0:
            lat += float(self.rng.uniform(0, self.jitter_us, pairs).sum())
        return lat

    def query(self, row: int, hops: int) -> tuple[Partition, float]:
        """Subgraph around a target transaction row, plus the synthetic latency (us) not yet slept."""
        if row not in self.where:
            raise InputError(f"transaction row {row} is not a target")
        pi, loc = self.where[row]
        p = self.td.partitions[pi]
        txns, ents = _expand(p, loc, hops)
        graph_accesses.hit()
        sub = p.subgraph(np.concatenate([[loc], txns, ents]))
        lat = self.latency_us(hops)
        if self.sleep and lat > 0:
            time.sleep(lat / 1e6)
            lat = 0.0
        return sub, lat


# -- the three request paths -------------------------------------------------------------


def _sample_rows(td: TDGraph, n: int, seed: int) -> np.ndarray:
    rows = np.concatenate([p.node_ref[p.targets] for p in td.partitions]) if td.partitions else np.zeros(0, np.int64)
    if td.split is not None:
        test = rows[td.split[rows] == 2]
        if len(test):
            rows = test
    if not len(rows):
        raise InputError("no target transactions to benchmark")
    rows = np.sort(rows)
    return np.random.default_rng(seed).choice(rows, size=n, replace=n > len(rows))


def run_bench(models: dict, store: EmbeddingStore, td: TDGraph, n_requests: int = 10_000, hops: int = 2,
              seed: int = 0, *, graph_latency_us: float = 0.0, jitter_us: float = 0.0, sleep: bool = False,
              warmup: int = 100, clock: Callable[[], int] = time.perf_counter_ns) -> BenchReport:
    """Benchmark ``models = {"baseline_gbdt": GBDTModel, "lnn": LNNModel, "encoder": GBDTModel}``.

    Models run one after another (never interleaved) over the same seeded
    request sample, each preceded by ``warmup`` unrecorded requests. The
    garbage collector is paused while a model's requests are timed.
    """
    if hops not in HOPS:
        raise InputError(f"hops must be one of {HOPS}")
    if n_requests < 100:
        raise InputError("n_requests must be at least 100")
    if not td.partitions:
        raise InputError("graph has no partitions")
    baseline: GBDTModel = models["baseline_gbdt"]
    lnn: LNNModel = models["lnn"]
    encoder: GBDTModel = models["encoder"]
    rows = _sample_rows(td, n_requests, seed)
    warm = rows[np.random.default_rng(seed + 1).integers(0, len(rows), warmup)] if warmup else rows[:0]
    feats = td.data.features
    us = 1e-3

    def base_one(row: int) -> LatencyRecord:
        t0 = clock()
        x = feats[row]
        t1 = clock()
        baseline.predict(x)
        t2 = clock()
        return LatencyRecord(0.0, (t1 - t0) * us, 0.0, (t2 - t1) * us, {"graph_query", "feature_encoding"})

    service = SimulatedGraphService(td, graph_latency_us, jitter_us, seed, sleep)
    def e2e_one(row: int) -> LatencyRecord:
        t0 = clock()
        sub, virtual = service.query(int(row), hops)
        t1 = clock()
        txn = np.nonzero(sub.node_kind != ENTITY)[0]
        x_raw = feats[sub.node_ref[txn]]
        t2 = clock()
        x = encoder.encode(x_raw).astype(DTYPE)
        t3 = clock()
        gb = prepare(sub)
        kinds = sub.node_kind[txn]
        out = forward(lnn, gb, x[kinds != TARGET], x[kinds == TARGET], DTYPE).scores
        float(out[np.nonzero(gb.target_rows == row)[0][0]])
        t4 = clock()
        return LatencyRecord((t1 - t0) * us + virtual, (t2 - t1) * us, (t3 - t2) * us, (t4 - t3) * us)

    scorer = RTScorer(lnn, encoder, store, clock=clock)
    reqs = {int(r): request_for(td, int(r)) for r in np.unique(np.concatenate([rows, warm]))}

    def rt_one(row: int) -> LatencyRecord:
        t = scorer.score(reqs[int(row)]).timings_us
        return LatencyRecord(0.0, t["feature_collection"], t["feature_encoding"], t["model_inference"], {"graph_query"})

    stats, accesses = {}, {}
    for name, fn in (("baseline_gbdt", base_one), ("e2e", e2e_one), ("rt", rt_one)):
        for r in warm:
            fn(int(r))
        before = graph_accesses.count
        gc_was_on = gc.isenabled()
        gc.disable()
        try:
            recs = [fn(int(r)) for r in rows]
        finally:
            if gc_was_on:
                gc.enable()
        accesses[name] = graph_accesses.count - before
        stats[name] = summarize(recs)

    env = (f"python {platform.python_version()} numpy {np.__version__} {platform.machine()} "
           f"{platform.system()}; single client thread; graph latency "
           f"{'slept' if sleep else 'virtual'}")
    return BenchReport(hops, n_requests, seed, graph_latency_us, stats, speedups(stats), accesses, env)
