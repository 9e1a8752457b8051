"""Static bi-graph -> snapshot graph -> two-stage directed (TD) partitions.

Node identity across the three stages:

* transactions are rows of the source :class:`~lambdafraud.datagen.Dataset`
  (``txn_id`` is kept alongside for reporting);
* entities are indices into a per-graph entity table sorted by
  ``(entity_type, key)``;
* snapshot entity *instances* are ``(entity, day)`` pairs.

A :class:`Partition` uses its own local node numbering. Local arrays are
canonically ordered by ``(timestamp, kind, id)`` so that identical inputs give
byte-identical serialisations.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from . import _io
from .datagen import Dataset, EntityKey, EntityType, TransactionRecord, as_dataset

TARGET, REFERENCE, ENTITY = 0, 1, 2
DEFAULT_NODE_BUDGET = 2048


class InputError(ValueError):
    pass


class _AccessCounter:
    """Counts reads of graph structure (adjacency builds, traversals, queries)."""

    def __init__(self):
        self.count = 0

    def hit(self, n: int = 1) -> None:
        self.count += n

    def reset(self) -> None:
        self.count = 0


graph_accesses = _AccessCounter()


# -- static graph -----------------------------------------------------------


@dataclass
class StaticGraph:
    txn_id: np.ndarray
    txn_time: np.ndarray
    entity_type: np.ndarray
    entity_key: np.ndarray
    edge_txn: np.ndarray
    edge_entity: np.ndarray

    @property
    def n_txn(self) -> int:
        return len(self.txn_id)

    @property
    def n_entities(self) -> int:
        return len(self.entity_type)

    @property
    def n_nodes(self) -> int:
        return self.n_txn + self.n_entities

    @property
    def n_edges(self) -> int:
        return len(self.edge_txn)

    def entity(self, idx: int) -> EntityKey:
        return EntityKey(EntityType(int(self.entity_type[idx])), int(self.entity_key[idx]))

    def edge_list(self) -> list[tuple[tuple[str, int], tuple[str, EntityKey]]]:
        return [
            (("txn", int(self.txn_id[t])), ("entity", self.entity(e)))
            for t, e in zip(self.edge_txn, self.edge_entity)
        ]

    def degrees(self) -> tuple[np.ndarray, np.ndarray]:
        return (
            np.bincount(self.edge_txn, minlength=self.n_txn),
            np.bincount(self.edge_entity, minlength=self.n_entities),
        )


def _links(data: Dataset):
    rows, types = np.nonzero(data.entities >= 0)
    keys = data.entities[rows, types]
    if len(keys) and keys.max() >= 2**56:
        raise InputError("entity keys must be < 2**56")
    return rows, types.astype(np.int64), keys


def build_static(records: Dataset | Sequence[TransactionRecord]) -> StaticGraph:
    data = as_dataset(records)
    if len(np.unique(data.txn_id)) != len(data):
        raise InputError("duplicate txn_id in input")
    rows, types, keys = _links(data)
    code = (types << 56) | keys
    uniq, inverse = np.unique(code, return_inverse=True)
    return StaticGraph(
        txn_id=data.txn_id.copy(),
        txn_time=data.timestamp.copy(),
        entity_type=(uniq >> 56).astype(np.int8),
        entity_key=uniq & ((1 << 56) - 1),
        edge_txn=rows.astype(np.int64),
        edge_entity=inverse.astype(np.int64).ravel(),
    )


# -- snapshot graph -----------------------------------------------------------


@dataclass
class SnapshotGraph:
    """Every node carries a day; entities are materialised once per day they are used.

    ``edge_role`` is 0 for a same-snapshot edge (a transaction linked to its
    entity on its own creation day) and 1 for a reference edge from an earlier
    snapshot ``i < t`` to the instance on day ``t``.
    """

    static: StaticGraph
    inst_entity: np.ndarray
    inst_day: np.ndarray
    edge_txn: np.ndarray
    edge_inst: np.ndarray
    edge_role: np.ndarray
    max_history: int | None
    source: Dataset | None = field(default=None, repr=False)

    @property
    def n_nodes(self) -> int:
        return self.static.n_txn + len(self.inst_entity)

    @property
    def n_edges(self) -> int:
        return len(self.edge_txn)

    def has_edge(self, txn_id: int, entity: EntityKey, day: int) -> bool:
        s = self.static
        rows = np.nonzero(s.txn_id == txn_id)[0]
        ent = np.nonzero((s.entity_type == int(entity.entity_type)) & (s.entity_key == entity.key))[0]
        if not len(rows) or not len(ent):
            return False
        inst = np.nonzero((self.inst_entity == ent[0]) & (self.inst_day == day))[0]
        if not len(inst):
            return False
        return bool(np.any((self.edge_txn == rows[0]) & (self.edge_inst == inst[0])))


def _expand_ranges(lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For ranges [lo_i, hi_i) return (owner index, position) for every element."""
    counts = hi - lo
    owner = np.repeat(np.arange(len(lo)), counts)
    if not len(owner):
        return owner, owner.copy()
    starts = np.cumsum(counts) - counts
    pos = np.arange(counts.sum()) - np.repeat(starts, counts) + np.repeat(lo, counts)
    return owner, pos


def build_snapshot(records: Dataset | Sequence[TransactionRecord], max_history: int | None = None) -> SnapshotGraph:
    """Place transactions on their creation day and link references to later instances.

    With ``max_history=None`` a transaction on day ``i`` is linked to every
    later instance of its entities; otherwise only to instances on days
    ``i < t <= i + max_history``.
    """
    data = as_dataset(records)
    static = build_static(data)
    day = static.txn_time
    n_days = int(day.max()) + 1 if len(day) else 1
    ent, row = static.edge_entity, static.edge_txn
    link_day = day[row]

    inst_code = np.unique(ent * n_days + link_day)
    inst_entity = inst_code // n_days
    inst_day = inst_code % n_days

    same_inst = np.searchsorted(inst_code, ent * n_days + link_day)

    # Reference edges: sort links by (entity, day); for each instance (e, t)
    # the links with day in [t - H, t) form one contiguous run.
    order = np.lexsort((link_day, ent))
    link_code = (ent * n_days + link_day)[order]
    lo_day = np.zeros_like(inst_day) if max_history is None else np.maximum(inst_day - max_history, 0)
    lo = np.searchsorted(link_code, inst_entity * n_days + lo_day, side="left")
    hi = np.searchsorted(link_code, inst_entity * n_days + inst_day, side="left")
    owner, pos = _expand_ranges(lo, hi)
    ref_txn = row[order][pos]
    ref_inst = owner

    edge_txn = np.concatenate([row, ref_txn]).astype(np.int64)
    edge_inst = np.concatenate([same_inst, ref_inst]).astype(np.int64)
    edge_role = np.concatenate([np.zeros(len(row), np.int8), np.ones(len(ref_txn), np.int8)])
    canon = np.lexsort((edge_txn, edge_inst))
    return SnapshotGraph(static, inst_entity, inst_day, edge_txn[canon], edge_inst[canon], edge_role[canon],
                         max_history, data)


# -- TD graph ---------------------------------------------------------------


@dataclass
class Partition:
    """One target day: targets, their day-``t`` entity instances and in-window references.

    ``node_ref`` holds the transaction row for TARGET/REFERENCE nodes and the
    entity-table index for ENTITY nodes. ``batch_edges`` rows are undirected
    ``(reference, entity)`` pairs; ``rt_edges`` rows are directed
    ``(source, destination)`` and should always read entity -> target.
    """

    day: int
    node_kind: np.ndarray
    node_ref: np.ndarray
    node_time: np.ndarray
    batch_edges: np.ndarray
    rt_edges: np.ndarray
    window: tuple[int, int] = (0, 0)
    _skeleton: sparse.csr_matrix | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.node_kind = np.asarray(self.node_kind, dtype=np.int8)
        self.node_ref = np.asarray(self.node_ref, dtype=np.int64)
        self.node_time = np.asarray(self.node_time, dtype=np.int64)
        self.batch_edges = np.asarray(self.batch_edges, dtype=np.int64).reshape(-1, 2)
        self.rt_edges = np.asarray(self.rt_edges, dtype=np.int64).reshape(-1, 2)

    @property
    def n_nodes(self) -> int:
        return len(self.node_kind)

    @property
    def n_edges(self) -> int:
        return len(self.batch_edges) + len(self.rt_edges)

    @property
    def targets(self) -> np.ndarray:
        return np.nonzero(self.node_kind == TARGET)[0]

    @property
    def references(self) -> np.ndarray:
        return np.nonzero(self.node_kind == REFERENCE)[0]

    @property
    def entities(self) -> np.ndarray:
        return np.nonzero(self.node_kind == ENTITY)[0]

    def skeleton(self) -> sparse.csr_matrix:
        """Undirected adjacency over batch and RT edges (cached)."""
        graph_accesses.hit()
        if self._skeleton is None:
            e = np.concatenate([self.batch_edges, self.rt_edges])
            n = self.n_nodes
            a = sparse.coo_matrix((np.ones(len(e), np.int8), (e[:, 0], e[:, 1])), shape=(n, n))
            a = (a + a.T).tocsr()
            a.data[:] = 1
            self._skeleton = a
        return self._skeleton

    def subgraph(self, nodes: np.ndarray) -> "Partition":
        """Induced sub-partition on ``nodes`` (local indices), re-numbered in canonical order."""
        nodes = np.unique(np.asarray(nodes, dtype=np.int64))
        remap = np.full(self.n_nodes, -1, dtype=np.int64)
        remap[nodes] = np.arange(len(nodes))

        def keep(edges):
            if not len(edges):
                return edges
            m = (remap[edges[:, 0]] >= 0) & (remap[edges[:, 1]] >= 0)
            return remap[edges[m]]

        return Partition(
            self.day,
            self.node_kind[nodes],
            self.node_ref[nodes],
            self.node_time[nodes],
            keep(self.batch_edges),
            keep(self.rt_edges),
            self.window,
        )

    def local_index(self, kind: int, ref: int) -> int:
        hit = np.nonzero((self.node_kind == kind) & (self.node_ref == ref))[0]
        if not len(hit):
            raise KeyError((kind, ref))
        return int(hit[0])


def _canonical_partition(day, window, kind, ref, time, batch_src_ref, batch_dst_ent, rt_src_ent, rt_dst_ref):
    order = np.lexsort((ref, kind, time))
    kind, ref, time = kind[order], ref[order], time[order]
    # Local lookup by (kind, ref): entities and txns live in separate id spaces.
    code = kind.astype(np.int64) * (1 << 56) + ref
    sorter = np.argsort(code)
    sc = code[sorter]

    def loc(k, r):
        return sorter[np.searchsorted(sc, k * (1 << 56) + r)]

    be = np.stack([loc(REFERENCE, batch_src_ref), loc(ENTITY, batch_dst_ent)], axis=1) if len(batch_src_ref) else np.zeros((0, 2), np.int64)
    rt = np.stack([loc(ENTITY, rt_src_ent), loc(TARGET, rt_dst_ref)], axis=1) if len(rt_src_ent) else np.zeros((0, 2), np.int64)
    be = be[np.lexsort((be[:, 1], be[:, 0]))] if len(be) else be
    rt = rt[np.lexsort((rt[:, 0], rt[:, 1]))] if len(rt) else rt
    return Partition(day, kind, ref, time, be, rt, window)


@dataclass
class TDGraph:
    """Two-stage directed graph: one :class:`Partition` per target day plus the source tables."""

    data: Dataset
    entity_type: np.ndarray
    entity_key: np.ndarray
    partitions: list[Partition]
    max_history: int
    split: np.ndarray | None = None
    communities: list[np.ndarray] | None = None
    node_budget: int = DEFAULT_NODE_BUDGET
    summary: dict = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return sum(p.n_nodes for p in self.partitions)

    @property
    def n_edges(self) -> int:
        return sum(p.n_edges for p in self.partitions)

    def partition(self, day: int) -> Partition:
        for p in self.partitions:
            if p.day == day:
                return p
        raise KeyError(f"no partition for day {day}")

    def entity(self, idx: int) -> EntityKey:
        return EntityKey(EntityType(int(self.entity_type[idx])), int(self.entity_key[idx]))

    def entity_index(self, key: EntityKey) -> int:
        code = (self.entity_type.astype(np.int64) << 56) | self.entity_key
        want = (int(key.entity_type) << 56) | int(key.key)
        i = int(np.searchsorted(code, want))
        if i >= len(code) or code[i] != want:
            raise KeyError(key)
        return i

    def ensure_communities(self, node_budget: int | None = None) -> list[np.ndarray]:
        """Per-partition mini-batch id for every node (computed once and cached)."""
        if node_budget is not None and node_budget != self.node_budget:
            self.node_budget = node_budget
            self.communities = None
        if self.communities is None:
            out = []
            for p in self.partitions:
                label = np.full(p.n_nodes, -1, dtype=np.int32)
                for i, mb in enumerate(make_minibatches(p, self.node_budget)):
                    label[mb.nodes] = i
                out.append(label)
            self.communities = out
        return self.communities

    def minibatches(self, node_budget: int | None = None) -> list["MiniBatchCommunity"]:
        labels = self.ensure_communities(node_budget)
        out = []
        for pi, (p, lab) in enumerate(zip(self.partitions, labels)):
            for c in range(int(lab.max()) + 1 if len(lab) else 0):
                out.append(MiniBatchCommunity(pi, p.day, np.nonzero(lab == c)[0], self.node_budget))
        return out

    # -- persistence ------------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = self.partitions
        comms = self.ensure_communities()

        def cat(arrs, width=None, dtype=np.int64):
            if not arrs:
                return np.zeros((0,) if width is None else (0, width), dtype)
            return np.concatenate(arrs).astype(dtype)

        arrays = {
            "txn_id": self.data.txn_id,
            "txn_time": self.data.timestamp,
            "txn_label": self.data.label,
            "txn_features": self.data.features,
            "txn_entities": self.data.entities,
            "split": self.split if self.split is not None else np.zeros(0, np.int8),
            "entity_type": self.entity_type,
            "entity_key": self.entity_key,
            "part_day": np.array([p.day for p in parts], np.int64),
            "part_window": np.array([p.window for p in parts], np.int64).reshape(-1, 2),
            "part_nodes": np.array([p.n_nodes for p in parts], np.int64),
            "part_batch": np.array([len(p.batch_edges) for p in parts], np.int64),
            "part_rt": np.array([len(p.rt_edges) for p in parts], np.int64),
            "node_kind": cat([p.node_kind for p in parts], dtype=np.int8),
            "node_ref": cat([p.node_ref for p in parts]),
            "node_time": cat([p.node_time for p in parts]),
            "node_community": cat(comms, dtype=np.int32),
            "batch_edges": cat([p.batch_edges for p in parts], 2),
            "rt_edges": cat([p.rt_edges for p in parts], 2),
        }
        meta = {
            "max_history": self.max_history,
            "node_budget": self.node_budget,
            "summary": self.summary,
            "data_meta": self.data.meta,
        }
        return _io.pack(b"LFTD", 1, meta, arrays)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "TDGraph":
        _, meta, a = _io.read(path, b"LFTD", 1)
        data = Dataset(a["txn_id"], a["txn_time"], a["txn_features"], a["txn_label"], a["txn_entities"],
                       meta.get("data_meta", {}))
        n_nodes, n_b, n_r = a["part_nodes"], a["part_batch"], a["part_rt"]
        on, ob, orr = (np.concatenate([[0], np.cumsum(x)]) for x in (n_nodes, n_b, n_r))
        parts, comms = [], []
        for i, day in enumerate(a["part_day"]):
            ns = slice(on[i], on[i + 1])
            parts.append(
                Partition(
                    int(day),
                    a["node_kind"][ns],
                    a["node_ref"][ns],
                    a["node_time"][ns],
                    a["batch_edges"][ob[i] : ob[i + 1]],
                    a["rt_edges"][orr[i] : orr[i + 1]],
                    tuple(int(v) for v in a["part_window"][i]),
                )
            )
            comms.append(a["node_community"][ns].copy())
        split = a["split"] if len(a["split"]) else None
        return cls(data, a["entity_type"], a["entity_key"], parts, meta["max_history"], split, comms,
                   meta["node_budget"], meta.get("summary", {}))

    def summary_table(self) -> str:
        lines = [f"{'graph':<10}{'#nodes':>12}{'#edges':>12}"]
        for stage in ("static", "snapshot", "td"):
            if stage in self.summary:
                s = self.summary[stage]
                lines.append(f"{stage:<10}{s['nodes']:>12,}{s['edges']:>12,}")
        return "\n".join(lines)


def build_td(snapshot: SnapshotGraph, max_history: int = 30) -> TDGraph:
    """Split the snapshot graph into one target partition per day.

    References are transactions from days ``[t - max_history, t)`` (truncated
    at day 0) linked to a day-``t`` entity instance; references that touch no
    day-``t`` target entity never enter a partition.
    """
    if max_history < 1:
        raise ValueError("max_history must be >= 1")
    static = snapshot.static
    day = static.txn_time
    inst_day = snapshot.inst_day
    e_day = inst_day[snapshot.edge_inst]
    e_txn_day = day[snapshot.edge_txn]
    in_window = (snapshot.edge_role == 0) | (e_txn_day >= e_day - max_history)

    order = np.argsort(e_day, kind="stable")
    order = order[in_window[order]]
    sorted_days = e_day[order]
    # Every transaction is a target on its own day, linked to entities or not.
    days = np.unique(day)
    ends = np.concatenate([days, [np.iinfo(np.int64).max]])
    bounds = np.searchsorted(sorted_days, ends)
    by_day = np.argsort(day, kind="stable")
    tbounds = np.searchsorted(day[by_day], ends)

    parts = []
    for i, t in enumerate(days):
        sel = order[bounds[i] : bounds[i + 1]]
        txn = snapshot.edge_txn[sel]
        ent = snapshot.inst_entity[snapshot.edge_inst[sel]]
        same = snapshot.edge_role[sel] == 0
        tgt_rows = np.sort(by_day[tbounds[i] : tbounds[i + 1]])
        ref_rows = np.unique(txn[~same])
        ent_ids = np.unique(ent)
        kind = np.concatenate([
            np.full(len(tgt_rows), TARGET, np.int8),
            np.full(len(ref_rows), REFERENCE, np.int8),
            np.full(len(ent_ids), ENTITY, np.int8),
        ])
        ref = np.concatenate([tgt_rows, ref_rows, ent_ids])
        time = np.concatenate([day[tgt_rows], day[ref_rows], np.full(len(ent_ids), t)])
        window = (max(0, int(t) - max_history), int(t))
        parts.append(
            _canonical_partition(int(t), window, kind, ref, time, txn[~same], ent[~same], ent[same], txn[same])
        )

    td = TDGraph(snapshot.source, static.entity_type, static.entity_key, parts, max_history)
    td.summary = {
        "static": {"nodes": static.n_nodes, "edges": static.n_edges},
        "snapshot": {"nodes": snapshot.n_nodes, "edges": snapshot.n_edges},
        "td": {"nodes": td.n_nodes, "edges": td.n_edges},
    }
    return td


def transform(data: Dataset | Sequence[TransactionRecord], max_history: int = 30,
              node_budget: int = DEFAULT_NODE_BUDGET, split: np.ndarray | None = None) -> TDGraph:
    """Full static -> snapshot -> TD pipeline keeping the source features and labels."""
    data = as_dataset(data)
    snap = build_snapshot(data, max_history=max_history)
    td = build_td(snap, max_history)
    td.split = split
    td.node_budget = node_budget
    return td


# -- leakage validation ----------------------------------------------------------


class ViolationKind(str, enum.Enum):
    FutureReference = "FutureReference"
    ReversedRTEdge = "ReversedRTEdge"
    InvalidRTEdge = "InvalidRTEdge"
    TargetBatchEdge = "TargetBatchEdge"
    TargetTargetPath = "TargetTargetPath"
    RoleOverlap = "RoleOverlap"


@dataclass(frozen=True)
class Violation:
    kind: ViolationKind
    day: int
    detail: str


@dataclass
class ValidationReport:
    violations: list[Violation]
    n_partitions: int

    @property
    def ok(self) -> bool:
        return not self.violations

    def count(self, kind: ViolationKind) -> int:
        return sum(v.kind == kind for v in self.violations)


def _validate_partition(p: Partition) -> list[Violation]:
    out: list[Violation] = []
    kind, time = p.node_kind, p.node_time
    is_txn = kind != ENTITY

    tgt_refs = set(p.node_ref[kind == TARGET].tolist())
    for r in sorted(tgt_refs & set(p.node_ref[kind == REFERENCE].tolist())):
        out.append(Violation(ViolationKind.RoleOverlap, p.day, f"txn row {r} is both target and reference"))

    rt = p.rt_edges
    good_rt = np.ones(len(rt), bool)
    for j, (s, d) in enumerate(rt):
        if kind[s] == ENTITY and kind[d] == TARGET:
            continue
        good_rt[j] = False
        if kind[s] == TARGET and kind[d] == ENTITY:
            out.append(Violation(ViolationKind.ReversedRTEdge, p.day, f"rt edge {s}->{d} points target->entity"))
        else:
            out.append(Violation(ViolationKind.InvalidRTEdge, p.day, f"rt edge {s}->{d} kinds {kind[s]}->{kind[d]}"))
    for s, d in p.batch_edges:
        if kind[s] == TARGET or kind[d] == TARGET:
            out.append(Violation(ViolationKind.TargetBatchEdge, p.day, f"batch edge {s}-{d} touches a target"))

    # Batch edges are undirected: reachability inside a batch component is total.
    n = p.n_nodes
    be = p.batch_edges
    adj = sparse.coo_matrix((np.ones(len(be)), (be[:, 0], be[:, 1])), shape=(n, n)) if len(be) else sparse.coo_matrix((n, n))
    _, comp = csgraph.connected_components(adj, directed=False)

    members: dict[int, np.ndarray] = {}
    comp_order = np.argsort(comp, kind="stable")
    splits = np.searchsorted(comp[comp_order], np.arange(comp.max() + 2 if n else 1))
    def members_of(c):
        if c not in members:
            members[c] = comp_order[splits[c] : splits[c + 1]]
        return members[c]

    clean = good_rt.all() and not any(v.kind == ViolationKind.TargetBatchEdge for v in out)
    if clean:
        # Every component that feeds a target is a batch component hanging off
        # one of its entities; nothing else can reach a message sink.
        txn_max = np.full(comp.max() + 1 if n else 0, np.iinfo(np.int64).min)
        np.maximum.at(txn_max, comp[is_txn & (kind != TARGET)], time[is_txn & (kind != TARGET)])
        src_comp = comp[rt[:, 0]] if len(rt) else np.zeros(0, np.int64)
        bad = np.nonzero(txn_max[src_comp] >= time[rt[:, 1]])[0] if len(rt) else []
        offenders = set()
        for j in bad:
            tgt = rt[j, 1]
            for u in members_of(int(src_comp[j])):
                if kind[u] == REFERENCE and time[u] >= time[tgt]:
                    offenders.add(int(u))
        for u in sorted(offenders):
            out.append(Violation(ViolationKind.FutureReference, p.day, f"reference node {u} (t={time[u]}) reaches an earlier target"))
        return out

    # General case: BFS over components following rt edges backwards.
    preds: dict[int, set[int]] = {}
    for s, d in rt:
        preds.setdefault(int(comp[d]), set()).add(int(comp[s]))
    offenders = set()
    tt_pairs = set()
    for tgt in np.nonzero(kind == TARGET)[0]:
        start = int(comp[tgt])
        seen = {start}
        queue = deque([start])
        while queue:
            c = queue.popleft()
            for q in preds.get(c, ()):
                if q not in seen:
                    seen.add(q)
                    queue.append(q)
        for c in seen:
            for u in members_of(c):
                if u == tgt or not is_txn[u]:
                    continue
                if kind[u] == TARGET:
                    tt_pairs.add((int(u), int(tgt)))
                elif time[u] >= time[tgt]:
                    offenders.add(int(u))
    for u in sorted(offenders):
        out.append(Violation(ViolationKind.FutureReference, p.day, f"reference node {u} (t={time[u]}) reaches an earlier target"))
    for a, b in sorted(tt_pairs):
        out.append(Violation(ViolationKind.TargetTargetPath, p.day, f"target {a} reaches target {b}"))
    return out


def validate_leakage_freedom(td: TDGraph | Sequence[Partition]) -> ValidationReport:
    parts = td.partitions if isinstance(td, TDGraph) else list(td)
    violations: list[Violation] = []
    for p in parts:
        violations.extend(_validate_partition(p))
    return ValidationReport(violations, len(parts))


# -- mini-batching ---------------------------------------------------------------


@dataclass
class MiniBatchCommunity:
    partition_index: int
    day: int
    nodes: np.ndarray
    node_budget: int

    @property
    def size(self) -> int:
        return len(self.nodes)


def _label_propagation(adj: sparse.csr_matrix, nodes: np.ndarray, max_rounds: int = 20) -> list[np.ndarray]:
    """Asynchronous label propagation in fixed node order; ties go to the smallest label."""
    local = {int(v): i for i, v in enumerate(nodes)}
    label = np.arange(len(nodes))
    nbrs = [np.array([local[int(u)] for u in adj.indices[adj.indptr[v] : adj.indptr[v + 1]] if int(u) in local],
                     dtype=np.int64) for v in nodes]
    for _ in range(max_rounds):
        changed = False
        for i, nb in enumerate(nbrs):
            if not len(nb):
                continue
            vals, counts = np.unique(label[nb], return_counts=True)
            best = vals[np.argmax(counts)]  # np.unique sorts, so argmax picks the smallest tied label
            if best != label[i]:
                label[i] = best
                changed = True
        if not changed:
            break
    return [nodes[label == l] for l in np.unique(label)]


def _bfs_chunks(adj: sparse.csr_matrix, nodes: np.ndarray, budget: int) -> list[np.ndarray]:
    order = csgraph.breadth_first_order(adj[nodes][:, nodes], 0, directed=False, return_predecessors=False)
    seen = np.zeros(len(nodes), bool)
    seen[order] = True
    order = np.concatenate([order, np.nonzero(~seen)[0]])
    return [nodes[np.sort(order[i : i + budget])] for i in range(0, len(order), budget)]


def first_fit_decreasing(sizes: Sequence[int], budget: int) -> list[list[int]]:
    """Indices of ``sizes`` packed into bins of capacity ``budget``, largest first."""
    order = sorted(range(len(sizes)), key=lambda i: (-sizes[i], i))
    bins: list[list[int]] = []
    load: list[int] = []
    for i in order:
        for b in range(len(bins)):
            if load[b] + sizes[i] <= budget:
                bins[b].append(i)
                load[b] += sizes[i]
                break
        else:
            bins.append([i])
            load.append(sizes[i])
    return bins


def make_minibatches(partition: Partition, node_budget: int = DEFAULT_NODE_BUDGET) -> list[MiniBatchCommunity]:
    """Connected components, oversize ones split, then packed first-fit decreasing."""
    if node_budget < 1:
        raise ValueError("node_budget must be >= 1")
    adj = partition.skeleton()
    n = partition.n_nodes
    if n == 0:
        return []
    _, comp = csgraph.connected_components(adj, directed=False)
    order = np.argsort(comp, kind="stable")
    bounds = np.searchsorted(comp[order], np.arange(comp.max() + 2))
    pieces: list[np.ndarray] = []
    for c in range(comp.max() + 1):
        nodes = np.sort(order[bounds[c] : bounds[c + 1]])
        if len(nodes) <= node_budget:
            pieces.append(nodes)
            continue
        for sub in _label_propagation(adj, nodes):
            if len(sub) <= node_budget:
                pieces.append(sub)
            else:
                pieces.extend(_bfs_chunks(adj, sub, node_budget))
    bins = first_fit_decreasing([len(p) for p in pieces], node_budget)
    out = [np.sort(np.concatenate([pieces[i] for i in b])) for b in bins]
    out.sort(key=lambda a: int(a[0]))
    return [MiniBatchCommunity(-1, partition.day, nodes, node_budget) for nodes in out]
