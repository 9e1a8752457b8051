"""Lambda network: residual graph-conv Batch Net, one-layer RT Net, linear decoder.

Rows are nodes, so a layer reads ``mean(self, neighbours) @ W + b``. The
aggregate is the arithmetic mean over the multiset ``{self} ∪ N(v)``,
realised as a row-normalised sparse matrix ``A = D^-1 (I + Adj)``.

Batch Net (one per layer)::

    H <- relu(A @ H @ W_l + b_l) + H

RT Net for a target with raw encoder embedding ``x`` and entity states ``E``::

    p   = x @ W_phi + b_phi
    m   = (p + sum_{e in N(tgt)} E_e) / (1 + |N(tgt)|)
    h   = relu(m @ W_rt + b_rt) + p
    out = h @ w_dec

Gradients are written out by hand; :func:`loss_and_grad` is the single
source used by training and by the finite-difference checks.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse

from . import _io
from .graph import ENTITY, REFERENCE, TARGET, Partition, TDGraph, graph_accesses

log = logging.getLogger(__name__)

_MAGIC = b"LFNN"
_VERSION = 1


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    """Graph handed to a network stage breaks that stage's edge contract."""


class TrainingError(RuntimeError):
    pass


def relu(x):
    return np.maximum(x, 0)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# -- parameters ----------------------------------------------------------------


@dataclass
class LNNModel:
    params: dict[str, np.ndarray]
    in_dim: int
    hidden_dim: int
    n_batch_layers: int
    meta: dict = field(default_factory=dict)
    _cast: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def init(cls, in_dim: int, hidden_dim: int = 64, n_batch_layers: int = 4, seed: int = 0) -> "LNNModel":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)

        def glorot(fan_in, fan_out, shape):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, size=shape)

        d = hidden_dim
        p = {"in.w": glorot(in_dim, d, (in_dim, d)), "in.b": np.zeros(d)}
        for l in range(n_batch_layers):
            p[f"batch.{l}.w"] = glorot(d, d, (d, d))
            p[f"batch.{l}.b"] = np.zeros(d)
        p["phi.w"] = glorot(in_dim, d, (in_dim, d))
        p["phi.b"] = np.zeros(d)
        p["rt.w"] = glorot(d, d, (d, d))
        p["rt.b"] = np.zeros(d)
        p["dec.w"] = glorot(d, 1, (d,))
        return cls(p, in_dim, hidden_dim, n_batch_layers)

    def as_dtype(self, dtype) -> dict[str, np.ndarray]:
        dtype = np.dtype(dtype)
        if dtype == np.float64:
            return self.params
        if dtype not in self._cast:
            self._cast[dtype] = {k: v.astype(dtype) for k, v in self.params.items()}
        return self._cast[dtype]

    def invalidate(self) -> None:
        self._cast.clear()

    def copy(self) -> "LNNModel":
        return LNNModel({k: v.copy() for k, v in self.params.items()}, self.in_dim, self.hidden_dim,
                        self.n_batch_layers, copy.deepcopy(self.meta))

    def to_bytes(self) -> bytes:
        meta = {"in_dim": self.in_dim, "hidden_dim": self.hidden_dim, "n_batch_layers": self.n_batch_layers,
                "meta": self.meta}
        return _io.pack(_MAGIC, _VERSION, meta, {k: self.params[k] for k in sorted(self.params)})

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "LNNModel":
        _, m, a = _io.unpack(data, _MAGIC, _VERSION)
        return cls(dict(a), m["in_dim"], m["hidden_dim"], m["n_batch_layers"], m.get("meta", {}))

    @classmethod
    def load(cls, path: str | Path) -> "LNNModel":
        return cls.from_bytes(Path(path).read_bytes())

    def checksum(self) -> str:
        return _io.digest(self.to_bytes())


# -- graph tensors ---------------------------------------------------------------


def mean_aggregator(n: int, edges: np.ndarray) -> sparse.csr_matrix:
    """Row-normalised ``I + Adj`` for an undirected edge list, as CSR."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(edges):
        e = np.unique(np.sort(edges, axis=1), axis=0)
        e = e[e[:, 0] != e[:, 1]]
    else:
        e = edges
    rows = np.concatenate([np.arange(n), e[:, 0], e[:, 1]])
    cols = np.concatenate([np.arange(n), e[:, 1], e[:, 0]])
    a = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    deg = np.asarray(a.sum(axis=1)).ravel()
    return sparse.diags(1.0 / deg) @ a


@dataclass
class GraphBatch:
    """Tensors for one (sub-)partition.

    Batch-graph nodes are ordered references first, then entities.
    ``target_entities`` is a ``(n_targets, n_entities)`` 0/1 incidence matrix.
    """

    ref_rows: np.ndarray
    target_rows: np.ndarray
    entity_ids: np.ndarray
    agg: sparse.csr_matrix
    agg_t: sparse.csr_matrix
    target_entities: sparse.csr_matrix
    target_entities_t: sparse.csr_matrix
    inv_rt_deg: np.ndarray
    day: int = -1
    _cast: dict = field(default_factory=dict, repr=False)

    @property
    def n_ref(self) -> int:
        return len(self.ref_rows)

    @property
    def n_entities(self) -> int:
        return len(self.entity_ids)

    @property
    def n_targets(self) -> int:
        return len(self.target_rows)

    def mats(self, dtype):
        dtype = np.dtype(dtype)
        if dtype not in self._cast:
            self._cast[dtype] = (
                self.agg.astype(dtype), self.agg_t.astype(dtype), self.target_entities.astype(dtype),
                self.target_entities_t.astype(dtype), self.inv_rt_deg.astype(dtype),
            )
        return self._cast[dtype]


def prepare(partition: Partition) -> GraphBatch:
    """Turn a partition into aggregation matrices; enforces the TD edge contract."""
    graph_accesses.hit()
    kind = partition.node_kind
    be, rt = partition.batch_edges, partition.rt_edges
    if len(be) and np.any(kind[be] == TARGET):
        raise ContractError("batch graph contains a target transaction")
    if len(rt) and (np.any(kind[rt[:, 0]] != ENTITY) or np.any(kind[rt[:, 1]] != TARGET)):
        raise ContractError("rt edges must run entity -> target")
    refs = np.nonzero(kind == REFERENCE)[0]
    ents = np.nonzero(kind == ENTITY)[0]
    tgts = np.nonzero(kind == TARGET)[0]
    bmap = np.full(partition.n_nodes, -1, np.int64)
    bmap[refs] = np.arange(len(refs))
    bmap[ents] = len(refs) + np.arange(len(ents))
    emap = np.full(partition.n_nodes, -1, np.int64)
    emap[ents] = np.arange(len(ents))
    tmap = np.full(partition.n_nodes, -1, np.int64)
    tmap[tgts] = np.arange(len(tgts))

    n_b = len(refs) + len(ents)
    agg = mean_aggregator(n_b, bmap[be] if len(be) else np.zeros((0, 2), np.int64))
    if len(rt):
        pairs = np.unique(np.stack([tmap[rt[:, 1]], emap[rt[:, 0]]], axis=1), axis=0)
    else:
        pairs = np.zeros((0, 2), np.int64)
    inc = sparse.csr_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(len(tgts), len(ents)))
    deg = np.asarray(inc.sum(axis=1)).ravel()
    return GraphBatch(
        ref_rows=partition.node_ref[refs],
        target_rows=partition.node_ref[tgts],
        entity_ids=partition.node_ref[ents],
        agg=agg.tocsr(),
        agg_t=agg.T.tocsr(),
        target_entities=inc,
        target_entities_t=inc.T.tocsr(),
        inv_rt_deg=1.0 / (1.0 + deg),
        day=partition.day,
    )


# -- forward stages ----------------------------------------------------------------


def conv_layer(h_prev: np.ndarray, edges, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """One residual mean-aggregation layer over an undirected edge list."""
    h_prev = np.asarray(h_prev)
    if h_prev.ndim != 2 or w.shape[0] != h_prev.shape[1]:
        raise ShapeError(f"state width {h_prev.shape} does not match weight {w.shape}")
    if w.shape[1] != h_prev.shape[1]:
        raise ShapeError("residual layer needs a square weight")
    agg = mean_aggregator(len(h_prev), edges)
    z = agg @ h_prev @ w
    if b is not None:
        z = z + b
    return relu(z) + h_prev


@dataclass
class ForwardTrace:
    layer_states: list[np.ndarray]
    layer_agg: list[np.ndarray]
    layer_pre: list[np.ndarray]
    entity_states: np.ndarray
    phi: np.ndarray
    rt_agg: np.ndarray
    rt_pre: np.ndarray
    target_states: np.ndarray
    scores: np.ndarray


def _batch_inputs(p, x_ref: np.ndarray, n_ent: int, dtype) -> np.ndarray:
    proj_ref = x_ref @ p["in.w"] + p["in.b"]
    proj_ent = np.broadcast_to(p["in.b"], (n_ent, p["in.b"].shape[0]))
    return np.vstack([proj_ref, proj_ent]).astype(dtype, copy=False)


def _batch_stack(model: LNNModel, p, gb: GraphBatch, x_ref, dtype):
    agg, _, _, _, _ = gb.mats(dtype)
    h = _batch_inputs(p, x_ref, gb.n_entities, dtype)
    states, aggs, pres = [h], [], []
    for l in range(model.n_batch_layers):
        ah = agg @ h
        z = ah @ p[f"batch.{l}.w"] + p[f"batch.{l}.b"]
        h = relu(z) + h
        aggs.append(ah)
        pres.append(z)
        states.append(h)
    return states, aggs, pres


def batch_net_forward(model: LNNModel, gb: GraphBatch, x_ref: np.ndarray, dtype=np.float64) -> np.ndarray:
    """Entity states after the Batch Net; references carry encoder embeddings, entities zeros."""
    p = model.as_dtype(dtype)
    x_ref = np.asarray(x_ref, dtype=dtype).reshape(gb.n_ref, model.in_dim)
    states, _, _ = _batch_stack(model, p, gb, x_ref, dtype)
    return states[-1][gb.n_ref :]


def phi(model: LNNModel, x_tgt: np.ndarray, dtype=np.float64) -> np.ndarray:
    p = model.as_dtype(dtype)
    return np.asarray(x_tgt, dtype=dtype) @ p["phi.w"] + p["phi.b"]


def rt_net_forward(model: LNNModel, x_tgt: np.ndarray, entity_states: np.ndarray, rt_edges,
                   n_targets: int | None = None, dtype=np.float64) -> np.ndarray:
    """RT layer from an explicit ``(entity, target)`` edge list (row indices into the inputs).

    ``rt_edges`` rows are read as entity -> target. A target's state depends
    only on its own features and its own entities.
    """
    x_tgt = np.atleast_2d(np.asarray(x_tgt, dtype=dtype))
    n_t = len(x_tgt) if n_targets is None else n_targets
    e = np.asarray(rt_edges, dtype=np.int64).reshape(-1, 2)
    inc = sparse.csr_matrix((np.ones(len(e)), (e[:, 1], e[:, 0])), shape=(n_t, len(entity_states)))
    inc.sum_duplicates()
    inc.data[:] = 1
    inv = (1.0 / (1.0 + np.asarray(inc.sum(axis=1)).ravel())).astype(dtype)
    return _rt_layer(model.as_dtype(dtype), x_tgt, np.asarray(entity_states, dtype=dtype), inc.astype(dtype), inv)[2]


def _rt_layer(p, x_tgt, ent, inc, inv_deg):
    ph = x_tgt @ p["phi.w"] + p["phi.b"]
    m = (ph + inc @ ent) * inv_deg[:, None]
    z = m @ p["rt.w"] + p["rt.b"]
    return ph, m, relu(z) + ph, z


def rt_single(p, x_tgt: np.ndarray, neighbour_states: np.ndarray) -> np.ndarray:
    """RT layer for one target given the stacked states of its entities (possibly zero rows)."""
    ph = x_tgt @ p["phi.w"] + p["phi.b"]
    if len(neighbour_states):
        m = (ph + neighbour_states.sum(axis=0)) * ph.dtype.type(1.0 / (1 + len(neighbour_states)))
    else:
        m = ph
    return relu(m @ p["rt.w"] + p["rt.b"]) + ph


def decode(model: LNNModel, h_rt: np.ndarray, dtype=np.float64) -> np.ndarray:
    return np.asarray(h_rt, dtype=dtype) @ model.as_dtype(dtype)["dec.w"]


def forward(model: LNNModel, gb: GraphBatch, x_ref: np.ndarray, x_tgt: np.ndarray, dtype=np.float64) -> ForwardTrace:
    p = model.as_dtype(dtype)
    x_ref = np.asarray(x_ref, dtype=dtype).reshape(gb.n_ref, model.in_dim)
    x_tgt = np.asarray(x_tgt, dtype=dtype).reshape(gb.n_targets, model.in_dim)
    states, aggs, pres = _batch_stack(model, p, gb, x_ref, dtype)
    ent = states[-1][gb.n_ref :]
    _, _, inc, _, inv = gb.mats(dtype)
    ph, m, h, z = _rt_layer(p, x_tgt, ent, inc, inv)
    return ForwardTrace(states, aggs, pres, ent, ph, m, z, h, h @ p["dec.w"])


def bce(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, scores) - labels * scores


def loss_and_grad(model: LNNModel, gb: GraphBatch, x_ref, x_tgt, labels, mask=None, dtype=np.float64,
                  input_grads: bool = False):
    """Mean binary cross-entropy over masked targets and its gradient for every parameter.

    Returns ``(loss, grads)``; with ``input_grads`` also ``(d x_ref, d x_tgt)``.
    """
    p = model.as_dtype(dtype)
    y = np.asarray(labels, dtype=dtype)
    mask = np.ones(gb.n_targets, bool) if mask is None else np.asarray(mask, bool)
    n = int(mask.sum())
    tr = forward(model, gb, x_ref, x_tgt, dtype)
    _, agg_t, _, inc_t, inv = gb.mats(dtype)
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    if n == 0:
        out = (0.0, grads)
        return out + ((np.zeros((gb.n_ref, model.in_dim), dtype), np.zeros((gb.n_targets, model.in_dim), dtype)),) if input_grads else out
    s = tr.scores
    loss = float(bce(s[mask], y[mask]).sum() / n)

    ds = np.where(mask, (_sigmoid(s) - y) / n, 0).astype(dtype)
    grads["dec.w"] = tr.target_states.T @ ds
    dh = np.outer(ds, p["dec.w"])
    dz = dh * (tr.rt_pre > 0)
    grads["rt.w"] = tr.rt_agg.T @ dz
    grads["rt.b"] = dz.sum(axis=0)
    dm = (dz @ p["rt.w"].T) * inv[:, None]
    dphi = dh + dm
    x_tgt_ = np.asarray(x_tgt, dtype=dtype).reshape(gb.n_targets, model.in_dim)
    grads["phi.w"] = x_tgt_.T @ dphi
    grads["phi.b"] = dphi.sum(axis=0)
    d_ent = inc_t @ dm

    dH = np.zeros_like(tr.layer_states[-1])
    dH[gb.n_ref :] = d_ent
    for l in reversed(range(model.n_batch_layers)):
        dz = dH * (tr.layer_pre[l] > 0)
        grads[f"batch.{l}.w"] = tr.layer_agg[l].T @ dz
        grads[f"batch.{l}.b"] = dz.sum(axis=0)
        dH = dH + agg_t @ (dz @ p[f"batch.{l}.w"].T)
    x_ref_ = np.asarray(x_ref, dtype=dtype).reshape(gb.n_ref, model.in_dim)
    grads["in.w"] = x_ref_.T @ dH[: gb.n_ref]
    grads["in.b"] = dH.sum(axis=0)
    if input_grads:
        return loss, grads, (dH[: gb.n_ref] @ p["in.w"].T, dphi @ p["phi.w"].T)
    return loss, grads


# -- training ---------------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    max_epochs: int = 128
    patience: int = 16
    hidden_dim: int = 64
    n_batch_layers: int = 4
    node_budget: int = 2048
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    dtype: str = "float32"


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k in params:
            g = grads[k].astype(np.float64)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class TrainBatch:
    graph: GraphBatch
    x_ref: np.ndarray
    x_tgt: np.ndarray
    labels: np.ndarray
    split: np.ndarray


def build_train_batches(td: TDGraph, embeddings: np.ndarray, node_budget: int | None = None,
                        dtype=np.float32) -> list[TrainBatch]:
    """One :class:`TrainBatch` per mini-batch community; every batch stays inside one partition."""
    split = td.split if td.split is not None else np.zeros(len(td.data), np.int8)
    out = []
    for mb in td.minibatches(node_budget):
        sub = td.partitions[mb.partition_index].subgraph(mb.nodes)
        gb = prepare(sub)
        if gb.n_targets == 0:
            continue
        out.append(TrainBatch(
            gb,
            embeddings[gb.ref_rows].astype(dtype),
            embeddings[gb.target_rows].astype(dtype),
            td.data.label[gb.target_rows].astype(dtype),
            split[gb.target_rows],
        ))
    return out


def _masked_loss_sum(model, batches: Sequence[TrainBatch], code: int, dtype) -> tuple[float, int]:
    total, n = 0.0, 0
    for b in batches:
        m = b.split == code
        if not m.any():
            continue
        s = forward(model, b.graph, b.x_ref, b.x_tgt, dtype).scores
        total += float(bce(s[m].astype(np.float64), b.labels[m].astype(np.float64)).sum())
        n += int(m.sum())
    return total, n


def train(model_init: LNNModel | None, batches: Sequence[TrainBatch], cfg: TrainConfig,
          in_dim: int | None = None) -> tuple[LNNModel, list[dict]]:
    """Adam on mean BCE of training targets, early-stopped on validation loss.

    Training stops once validation loss has failed to improve for more than
    ``cfg.patience`` consecutive epochs (``patience=0`` stops at the first
    non-improving epoch). Falls back to training loss when no batch holds
    validation targets. Returns the best-epoch parameters and the history.
    """
    dtype = np.dtype(cfg.dtype)
    if not batches:
        raise TrainingError("no mini-batches to train on")
    if model_init is None:
        if in_dim is None:
            in_dim = batches[0].x_tgt.shape[1]
        model_init = LNNModel.init(in_dim, cfg.hidden_dim, cfg.n_batch_layers, cfg.seed)
    model = model_init.copy()
    model.meta["train_config"] = asdict(cfg)
    opt = Adam(model.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    train_idx = [i for i, b in enumerate(batches) if np.any(b.split == 0)]
    if not train_idx:
        raise TrainingError("no training targets in any mini-batch")
    has_val = any(np.any(b.split == 1) for b in batches)
    history: list[dict] = []
    best, best_loss, stale = model.copy(), np.inf, 0
    for epoch in range(cfg.max_epochs):
        tot, cnt = 0.0, 0
        for i in rng.permutation(train_idx):
            b = batches[i]
            m = b.split == 0
            loss, grads = loss_and_grad(model, b.graph, b.x_ref, b.x_tgt, b.labels, m, dtype)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, partition day {b.graph.day}")
            opt.step(model.params, grads)
            model.invalidate()
            tot += loss * int(m.sum())
            cnt += int(m.sum())
        if has_val:
            vs, vn = _masked_loss_sum(model, batches, 1, dtype)
            val_loss = vs / vn
        else:
            ts, tn = _masked_loss_sum(model, batches, 0, dtype)
            val_loss = ts / tn
        history.append({"epoch": epoch, "train_loss": tot / cnt, "val_loss": val_loss})
        log.info("epoch %d train %.5f val %.5f", epoch, tot / cnt, val_loss)
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        if val_loss < best_loss:
            best, best_loss, stale = model.copy(), val_loss, 0
        else:
            stale += 1
            if stale > cfg.patience:
                break
    best.meta["history"] = history
    best.meta["best_val_loss"] = best_loss
    return best, history
