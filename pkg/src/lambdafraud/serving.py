"""Decoupled inference: offline entity embeddings, online one-hop scoring.

The batch stage runs the Batch Net over a partition's reference graph and
writes one float32 vector per ``(entity, day)`` to an immutable file-backed
store. The real-time stage then scores a transaction from its raw features
and the entity keys carried in the request, and never touches graph
structure.
"""

from __future__ import annotations

import hashlib
import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import _io
from .datagen import N_ENTITY_TYPES, ConfigError, EntityKey, EntityType
from .encoder import DimensionError, GBDTModel, sigmoid
from .graph import InputError, Partition, TDGraph
from .nn import LNNModel, batch_net_forward, forward, prepare, rt_single

_MAGIC = b"LFES"
_VERSION = 1
DTYPE = np.float32


class ServiceError(RuntimeError):
    pass


class StaleStoreWarning(UserWarning):
    """Store manifest was produced by a different model/encoder pair."""


CorruptStoreError = _io.CorruptFileError


def pipeline_checksum(lnn: LNNModel, encoder: GBDTModel) -> str:
    h = hashlib.sha256()
    h.update(lnn.checksum().encode())
    h.update(encoder.checksum().encode())
    return h.hexdigest()


def _check_dims(lnn: LNNModel, encoder: GBDTModel) -> None:
    if encoder.n_trees != lnn.in_dim:
        raise ConfigError(f"encoder emits {encoder.n_trees} values but the network expects {lnn.in_dim}")


# -- batch inference -----------------------------------------------------------------


def batch_infer(lnn: LNNModel, encoder: GBDTModel, td: TDGraph,
                partition: Partition | None = None) -> list[tuple[tuple[EntityKey, int], np.ndarray]]:
    """Entity embeddings for one partition (or all of them when ``partition`` is None)."""
    _check_dims(lnn, encoder)
    parts = td.partitions if partition is None else [partition]
    out = []
    for p in parts:
        gb = prepare(p)
        x_ref = encoder.encode(td.data.features[gb.ref_rows]).astype(DTYPE) if gb.n_ref else np.zeros((0, lnn.in_dim), DTYPE)
        states = batch_net_forward(lnn, gb, x_ref, DTYPE)
        for e, vec in zip(gb.entity_ids, states):
            out.append(((td.entity(int(e)), p.day), np.asarray(vec, DTYPE)))
    return out


# -- embedding store ----------------------------------------------------------------


@dataclass
class EmbeddingStore:
    """Immutable mapping ``(EntityKey, day) -> float32 vector``, keys held sorted."""

    key_type: np.ndarray
    key_key: np.ndarray
    key_day: np.ndarray
    vectors: np.ndarray
    manifest: dict
    _index: dict | None = field(default=None, repr=False)

    @property
    def hidden_dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.key_type)

    def _lookup_table(self) -> dict:
        if self._index is None:
            self._index = {
                (int(t), int(k), int(d)): i
                for i, (t, k, d) in enumerate(zip(self.key_type.tolist(), self.key_key.tolist(), self.key_day.tolist()))
            }
        return self._index

    def row(self, key: EntityKey, day: int) -> int | None:
        return self._lookup_table().get((int(key.entity_type), int(key.key), int(day)))

    def get(self, key: EntityKey, day: int) -> np.ndarray | None:
        """Vector for the key, or ``None`` when absent (never a zero fill-in)."""
        i = self.row(key, day)
        return None if i is None else self.vectors[i]

    def items(self):
        for i in range(len(self)):
            yield (EntityKey(EntityType(int(self.key_type[i])), int(self.key_key[i])), int(self.key_day[i])), self.vectors[i]

    def is_stale_for(self, checksum: str) -> bool:
        return self.manifest.get("model_checksum") != checksum


def _as_pairs(embeddings) -> list:
    if isinstance(embeddings, Mapping):
        return list(embeddings.items())
    return list(embeddings)


def store_flush(embeddings, path: str | Path, model_checksum: str = "", refresh_day: int | None = None) -> dict:
    """Write a canonical store file and return its manifest."""
    pairs = _as_pairs(embeddings)
    if not pairs:
        raise ValueError("nothing to flush")
    t = np.array([int(k.entity_type) for (k, _), _ in pairs], np.int8)
    kk = np.array([int(k.key) for (k, _), _ in pairs], np.int64)
    dd = np.array([int(d) for (_, d), _ in pairs], np.int64)
    vecs = np.stack([np.asarray(v, dtype=DTYPE) for _, v in pairs])
    order = np.lexsort((dd, kk, t))
    t, kk, dd, vecs = t[order], kk[order], dd[order], vecs[order]
    dup = (t[1:] == t[:-1]) & (kk[1:] == kk[:-1]) & (dd[1:] == dd[:-1])
    if dup.any():
        raise ValueError("duplicate (entity, day) keys in flush")
    manifest = {
        "model_checksum": model_checksum,
        "refresh_day": int(dd.max()) if refresh_day is None else int(refresh_day),
        "hidden_dim": int(vecs.shape[1]),
        "n_entries": int(len(vecs)),
    }
    _io.write(path, _MAGIC, _VERSION, manifest, {"key_type": t, "key_key": kk, "key_day": dd, "vectors": vecs})
    return manifest


def store_load(path: str | Path, expected_checksum: str | None = None) -> EmbeddingStore:
    """Load and verify a store; warns :class:`StaleStoreWarning` on checksum mismatch."""
    _, manifest, a = _io.read(path, _MAGIC, _VERSION)
    store = EmbeddingStore(a["key_type"], a["key_key"], a["key_day"], a["vectors"], manifest)
    if expected_checksum is not None and store.is_stale_for(expected_checksum):
        warnings.warn(f"embedding store {path} was built for a different model", StaleStoreWarning, stacklevel=2)
    return store


# -- real-time scoring ------------------------------------------------------------------


@dataclass
class ScoreRequest:
    features: np.ndarray
    entities: Sequence[EntityKey]
    day: int
    txn_id: int | None = None

    def __post_init__(self):
        if len(self.entities) > N_ENTITY_TYPES:
            raise InputError(f"at most {N_ENTITY_TYPES} entities per request")
        types = [int(e.entity_type) for e in self.entities]
        if len(set(types)) != len(types):
            raise InputError("request carries two keys of the same entity type")

    @classmethod
    def from_json(cls, obj: dict) -> "ScoreRequest":
        ents = [EntityKey(EntityType[t] if isinstance(t, str) else EntityType(t), int(k)) for t, k in obj["entities"]]
        return cls(np.asarray(obj["features"], dtype=np.float64), ents, int(obj["day"]), obj.get("txn_id"))

    def to_json(self) -> dict:
        return {
            "txn_id": self.txn_id,
            "day": int(self.day),
            "features": [float(v) for v in self.features],
            "entities": [[EntityType(e.entity_type).name, int(e.key)] for e in self.entities],
        }


@dataclass
class ScoreResponse:
    score: float
    probability: float
    timings_us: dict[str, float]
    missing_entities: int
    stale: bool = False
    txn_id: int | None = None

    def to_json(self) -> dict:
        return {
            "txn_id": self.txn_id,
            "score": self.score,
            "probability": self.probability,
            "missing_entities": self.missing_entities,
            "stale": self.stale,
            "timings_us": self.timings_us,
        }


class RTScorer:
    """Holds float32 parameters and the store; reentrant, read-only after construction."""

    def __init__(self, lnn: LNNModel, encoder: GBDTModel, store: EmbeddingStore | None,
                 clock=time.perf_counter_ns):
        _check_dims(lnn, encoder)
        if store is None:
            raise ServiceError("embedding store is not available")
        if store.hidden_dim != lnn.hidden_dim:
            raise ConfigError(f"store width {store.hidden_dim} != network width {lnn.hidden_dim}")
        self.lnn, self.encoder, self.store = lnn, encoder, store
        self.params = lnn.as_dtype(DTYPE)
        self.clock = clock
        self.stale = store.is_stale_for(pipeline_checksum(lnn, encoder))
        if self.stale:
            warnings.warn("scoring with an embedding store built for a different model", StaleStoreWarning, stacklevel=2)
        store._lookup_table()

    def collect(self, req: ScoreRequest) -> tuple[np.ndarray, int]:
        rows = [self.store.row(e, req.day) for e in req.entities]
        hit = [r for r in rows if r is not None]
        return self.store.vectors[hit], len(rows) - len(hit)

    def infer(self, x: np.ndarray, neighbours: np.ndarray) -> float:
        return float(rt_single(self.params, x, neighbours) @ self.params["dec.w"])

    def score(self, req: ScoreRequest) -> ScoreResponse:
        clock = self.clock
        t0 = clock()
        neighbours, missing = self.collect(req)
        t1 = clock()
        try:
            x = self.encoder.encode(np.asarray(req.features, dtype=np.float64)).astype(DTYPE)
        except DimensionError as exc:
            raise InputError(str(exc)) from exc
        t2 = clock()
        s = self.infer(x, neighbours)
        t3 = clock()
        return ScoreResponse(
            s,
            float(sigmoid(s)),
            {"feature_collection": (t1 - t0) / 1e3, "feature_encoding": (t2 - t1) / 1e3, "model_inference": (t3 - t2) / 1e3},
            missing,
            self.stale,
            req.txn_id,
        )


def rt_score(lnn: LNNModel, encoder: GBDTModel, store: EmbeddingStore | None, req: ScoreRequest) -> ScoreResponse:
    return RTScorer(lnn, encoder, store).score(req)


def request_for(td: TDGraph, row: int) -> ScoreRequest:
    """The online request a transaction would arrive with: raw features + its one-hop keys."""
    ents = [EntityKey(EntityType(t), int(k)) for t, k in enumerate(td.data.entities[row]) if k >= 0]
    return ScoreRequest(td.data.features[row], ents, int(td.data.timestamp[row]), int(td.data.txn_id[row]))


# -- end-to-end reference path -----------------------------------------------------------


def e2e_scores(lnn: LNNModel, encoder: GBDTModel, td: TDGraph, partition: Partition) -> tuple[np.ndarray, np.ndarray]:
    """Full forward over a partition; returns ``(target rows, scores)``."""
    _check_dims(lnn, encoder)
    gb = prepare(partition)
    feats = td.data.features
    x_ref = encoder.encode(feats[gb.ref_rows]).astype(DTYPE) if gb.n_ref else np.zeros((0, lnn.in_dim), DTYPE)
    x_tgt = encoder.encode(feats[gb.target_rows]).astype(DTYPE)
    return gb.target_rows, forward(lnn, gb, x_ref, x_tgt, DTYPE).scores


def e2e_score(lnn: LNNModel, encoder: GBDTModel, td: TDGraph, partition: Partition, target_id: int) -> float:
    rows, scores = e2e_scores(lnn, encoder, td, partition)
    hit = np.nonzero(td.data.txn_id[rows] == target_id)[0]
    if not len(hit):
        raise InputError(f"transaction {target_id} is not a target of partition {partition.day}")
    return float(scores[hit[0]])


def read_requests(path: str | Path) -> list[ScoreRequest]:
    with open(path) as fh:
        return [ScoreRequest.from_json(json.loads(line)) for line in fh if line.strip()]
