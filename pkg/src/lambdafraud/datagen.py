"""Seeded synthetic checkout streams with shared entities and fraud rings.

Transactions are kept columnar (:class:`Dataset`) inside the pipeline; the
record-level view (:class:`TransactionRecord`) is what :func:`generate`
returns and what the line-oriented dataset file stores.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _io

__all__ = [
    "ConfigError",
    "SplitError",
    "EntityType",
    "EntityKey",
    "TransactionRecord",
    "DatasetConfig",
    "Dataset",
    "generate",
    "generate_dataset",
    "split_by_time",
    "split_masks",
]


class ConfigError(ValueError):
    pass


class SplitError(ValueError):
    pass


class EntityType(enum.IntEnum):
    ShipAddr = 0
    Email = 1
    IP = 2
    DeviceID = 3
    Phone = 4
    PaymentToken = 5
    BuyerAccount = 6


N_ENTITY_TYPES = len(EntityType)


@dataclass(frozen=True, order=True)
class EntityKey:
    entity_type: EntityType
    key: int

    def __post_init__(self):
        object.__setattr__(self, "entity_type", EntityType(self.entity_type))


@dataclass(frozen=True)
class TransactionRecord:
    txn_id: int
    timestamp: int
    features: tuple[float, ...]
    label: int
    entities: tuple[EntityKey, ...]

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if self.timestamp < 0:
            raise ValueError("timestamp must be >= 0")
        types = [e.entity_type for e in self.entities]
        if len(set(types)) != len(types):
            raise ValueError(f"txn {self.txn_id}: more than one key for an entity type")


def _default_pools(n: int) -> dict[str, int]:
    n = max(n, 1)
    return {
        "ShipAddr": 4 * n,
        "Email": 4 * n,
        "IP": max(1, n // 4),
        "DeviceID": 4 * n,
        "Phone": 4 * n,
        "PaymentToken": 4 * n,
        "BuyerAccount": max(1, n // 3),
    }


@dataclass
class DatasetConfig:
    """Generator knobs. ``entity_pool_sizes`` defaults scale with ``n_transactions``.

    ``BuyerAccount`` is the number of distinct legitimate customers; every other
    pool is the key space from which customer-owned entities are drawn. ``IP``
    is deliberately small so that unrelated legitimate traffic shares nodes.
    """

    n_transactions: int = 10_000
    n_days: int = 60
    fraud_ratio: float = 0.025
    n_fraud_rings: int = 8
    ring_size: int = 20
    entity_pool_sizes: dict[str, int] | None = None
    feature_dim: int = 16
    feature_noise: float = 1.0
    ring_span_days: int = 14
    seed: int = 0

    def pools(self) -> dict[str, int]:
        pools = _default_pools(self.n_transactions)
        if self.entity_pool_sizes:
            unknown = set(self.entity_pool_sizes) - set(pools)
            if unknown:
                raise ConfigError(f"unknown entity types in entity_pool_sizes: {sorted(unknown)}")
            pools.update(self.entity_pool_sizes)
        return pools

    def validate(self) -> None:
        if self.n_transactions < 0:
            raise ConfigError("n_transactions must be >= 0")
        if self.n_days < 1:
            raise ConfigError("n_days must be >= 1")
        if not (0.0 < self.fraud_ratio < 1.0):
            raise ConfigError("fraud_ratio must lie in (0, 1)")
        if self.n_fraud_rings < 0 or (self.n_fraud_rings > 0 and self.ring_size < 1):
            raise ConfigError("n_fraud_rings must be >= 0 and ring_size >= 1")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        if self.feature_noise < 0:
            raise ConfigError("feature_noise must be >= 0")
        if self.ring_span_days < 1:
            raise ConfigError("ring_span_days must be >= 1")
        if any(v < 1 for v in self.pools().values()):
            raise ConfigError("entity pool sizes must be >= 1")
        n_fraud = _fraud_count(self)
        if self.n_transactions and self.n_fraud_rings * self.ring_size > n_fraud:
            raise ConfigError(
                f"{self.n_fraud_rings} rings x {self.ring_size} exceeds the {n_fraud} fraud transactions"
            )

    def to_dict(self) -> dict:
        return asdict(self)


def _fraud_count(cfg: DatasetConfig) -> int:
    return int(round(cfg.n_transactions * cfg.fraud_ratio))


@dataclass
class Dataset:
    """Columnar transaction table.

    ``entities`` is ``(n, 7)`` int64 indexed by :class:`EntityType`; ``-1``
    marks an absent link.
    """

    txn_id: np.ndarray
    timestamp: np.ndarray
    features: np.ndarray
    label: np.ndarray
    entities: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.txn_id = np.asarray(self.txn_id, dtype=np.int64)
        self.timestamp = np.asarray(self.timestamp, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.label = np.asarray(self.label, dtype=np.int8)
        self.entities = np.asarray(self.entities, dtype=np.int64)
        n = len(self.txn_id)
        if self.features.ndim != 2 or self.features.shape[0] != n:
            if n == 0:
                self.features = self.features.reshape(0, -1 if self.features.size else 0)
            else:
                raise ValueError("features must be (n, F)")
        if self.entities.shape != (n, N_ENTITY_TYPES):
            if n == 0:
                self.entities = self.entities.reshape(0, N_ENTITY_TYPES)
            else:
                raise ValueError("entities must be (n, 7)")

    def __len__(self) -> int:
        return len(self.txn_id)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.txn_id[idx], self.timestamp[idx], self.features[idx], self.label[idx], self.entities[idx], dict(self.meta)
        )

    def records(self) -> list[TransactionRecord]:
        out = []
        for i in range(len(self)):
            ents = tuple(
                EntityKey(EntityType(t), int(k)) for t, k in enumerate(self.entities[i]) if k >= 0
            )
            out.append(
                TransactionRecord(
                    int(self.txn_id[i]),
                    int(self.timestamp[i]),
                    tuple(float(v) for v in self.features[i]),
                    int(self.label[i]),
                    ents,
                )
            )
        return out

    @classmethod
    def from_records(cls, records: Sequence[TransactionRecord], feature_dim: int | None = None) -> "Dataset":
        n = len(records)
        if feature_dim is None:
            feature_dim = len(records[0].features) if n else 0
        feats = np.zeros((n, feature_dim))
        ents = np.full((n, N_ENTITY_TYPES), -1, dtype=np.int64)
        for i, r in enumerate(records):
            if len(r.features) != feature_dim:
                raise ValueError(f"txn {r.txn_id}: feature dimension {len(r.features)} != {feature_dim}")
            feats[i] = r.features
            for e in r.entities:
                ents[i, int(e.entity_type)] = e.key
        return cls(
            np.array([r.txn_id for r in records], dtype=np.int64),
            np.array([r.timestamp for r in records], dtype=np.int64),
            feats,
            np.array([r.label for r in records], dtype=np.int8),
            ents,
        )

    # -- persistence -------------------------------------------------------

    def to_jsonl(self, path: str | Path) -> None:
        header = {
            "format": "lambdafraud.dataset",
            "version": 1,
            "feature_dim": self.feature_dim,
            "entity_types": [t.name for t in EntityType],
            "n_records": len(self),
            "meta": self.meta,
        }
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for i in range(len(self)):
                row = {
                    "txn_id": int(self.txn_id[i]),
                    "timestamp": int(self.timestamp[i]),
                    "label": int(self.label[i]),
                    "features": [float(v) for v in self.features[i]],
                    "entities": [[EntityType(t).name, int(k)] for t, k in enumerate(self.entities[i]) if k >= 0],
                }
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "Dataset":
        with open(path, encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            if header.get("format") != "lambdafraud.dataset":
                raise ValueError(f"{path}: not a dataset file")
            f = header["feature_dim"]
            type_of = {name: EntityType[name] for name in header["entity_types"]}
            ids, ts, labels, feats, ents = [], [], [], [], []
            for line in fh:
                if not line.strip():
                    continue
                row = json.loads(line)
                ids.append(row["txn_id"])
                ts.append(row["timestamp"])
                labels.append(row["label"])
                feats.append(row["features"])
                e = [-1] * N_ENTITY_TYPES
                for name, key in row["entities"]:
                    e[type_of[name]] = key
                ents.append(e)
        return cls(ids, ts, np.array(feats, dtype=np.float64).reshape(len(ids), f), labels,
                   np.array(ents, dtype=np.int64).reshape(len(ids), N_ENTITY_TYPES), header.get("meta", {}))

    def to_bytes(self) -> bytes:
        return _io.pack(
            b"LFDS",
            1,
            {"feature_dim": self.feature_dim, "entity_types": [t.name for t in EntityType], "meta": self.meta},
            {
                "txn_id": self.txn_id,
                "timestamp": self.timestamp,
                "label": self.label,
                "features": self.features,
                "entities": self.entities,
            },
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        """Load either the binary container or the line-oriented text form."""
        raw = Path(path).read_bytes()
        if raw[:4] == b"LFDS":
            _, meta, a = _io.unpack(raw, b"LFDS", 1)
            return cls(a["txn_id"], a["timestamp"], a["features"], a["label"], a["entities"], meta.get("meta", {}))
        return cls.from_jsonl(path)


def as_dataset(data: Dataset | Sequence[TransactionRecord]) -> Dataset:
    if isinstance(data, Dataset):
        return data
    return Dataset.from_records(list(data))


# -- generator --------------------------------------------------------------

# Probability that a legitimate transaction carries each entity type.
_LEGIT_LINK_P = {
    EntityType.ShipAddr: 0.9,
    EntityType.Email: 0.8,
    EntityType.IP: 0.9,
    EntityType.DeviceID: 0.8,
    EntityType.Phone: 0.5,
    EntityType.PaymentToken: 0.9,
    EntityType.BuyerAccount: 1.0,
}


def _feature_model(rng: np.random.Generator, f: int):
    """Class-conditional Gaussian mixtures whose means overlap."""
    legit_centers = rng.normal(0.0, 1.0, size=(3, f))
    shift = np.zeros(f)
    informative = rng.choice(f, size=max(1, f // 2), replace=False)
    shift[informative] = rng.choice([-1.0, 1.0], size=len(informative)) * rng.uniform(0.5, 0.9, size=len(informative))
    fraud_centers = legit_centers[:2] + shift
    return legit_centers, fraud_centers


def generate_dataset(config: DatasetConfig) -> Dataset:
    config.validate()
    n = config.n_transactions
    f = config.feature_dim
    if n == 0:
        return Dataset(np.zeros(0), np.zeros(0), np.zeros((0, f)), np.zeros(0), np.zeros((0, N_ENTITY_TYPES)),
                       {"config": config.to_dict()})

    rng = np.random.default_rng(config.seed)
    pools = config.pools()
    pool = np.array([pools[t.name] for t in EntityType], dtype=np.int64)
    fresh = pool.copy()  # next never-used key per type, above the pool range

    def fresh_keys(t: EntityType, k: int) -> np.ndarray:
        start = fresh[t]
        fresh[t] += k
        return np.arange(start, start + k, dtype=np.int64)

    n_fraud = _fraud_count(config)
    n_ring = config.n_fraud_rings * config.ring_size
    n_legit = n - n_fraud

    ts = np.empty(n, dtype=np.int64)
    label = np.zeros(n, dtype=np.int8)
    label[n_legit:] = 1
    ents = np.full((n, N_ENTITY_TYPES), -1, dtype=np.int64)

    # Legitimate customers own a persistent set of entities drawn from the pools.
    n_users = int(pool[EntityType.BuyerAccount])
    user_keys = np.stack([rng.integers(0, pool[t], size=n_users) for t in EntityType], axis=1)
    user_keys[:, EntityType.BuyerAccount] = np.arange(n_users)
    users = rng.integers(0, n_users, size=n_legit)
    ts[:n_legit] = rng.integers(0, config.n_days, size=n_legit)
    for t in EntityType:
        present = rng.random(n_legit) < _LEGIT_LINK_P[t]
        if t == EntityType.IP:
            keys = rng.integers(0, pool[t], size=n_legit)
        else:
            keys = user_keys[users, t]
        ents[:n_legit, t] = np.where(present, keys, -1)

    # Fraud rings: one shared device per ring (guaranteed common key), plus
    # small risky pools of tokens, accounts, addresses and IPs.
    span = min(config.ring_span_days, config.n_days)
    row = n_legit
    for _ in range(config.n_fraud_rings):
        k = config.ring_size
        sl = slice(row, row + k)
        start = rng.integers(0, config.n_days - span + 1)
        ts[sl] = start + rng.integers(0, span, size=k)
        ents[sl, EntityType.DeviceID] = fresh_keys(EntityType.DeviceID, 1)[0]
        for t, n_shared, p in (
            (EntityType.PaymentToken, 2, 0.7),
            (EntityType.BuyerAccount, 3, 0.5),
            (EntityType.ShipAddr, 2, 0.6),
            (EntityType.IP, 2, 0.5),
        ):
            shared = fresh_keys(t, n_shared)
            own = fresh_keys(t, k)
            use_shared = rng.random(k) < p
            ents[sl, t] = np.where(use_shared, shared[rng.integers(0, n_shared, size=k)], own)
        ents[sl, EntityType.Email] = fresh_keys(EntityType.Email, k)
        ents[sl, EntityType.Phone] = np.where(rng.random(k) < 0.3, fresh_keys(EntityType.Phone, k), -1)
        row += k

    # Lone fraudsters use throwaway identities.
    n_solo = n_fraud - n_ring
    sl = slice(row, n)
    ts[sl] = rng.integers(0, config.n_days, size=n_solo)
    for t in EntityType:
        if t == EntityType.IP:
            keys = rng.integers(0, pool[t], size=n_solo)
        else:
            keys = fresh_keys(t, n_solo)
        present = rng.random(n_solo) < _LEGIT_LINK_P[t]
        ents[sl, t] = np.where(present, keys, -1)

    legit_c, fraud_c = _feature_model(rng, f)
    comp = np.where(label == 1, rng.integers(0, len(fraud_c), size=n), rng.integers(0, len(legit_c), size=n))
    centers = np.where(label[:, None] == 1, fraud_c[np.minimum(comp, len(fraud_c) - 1)], legit_c[comp])
    feats = centers + rng.normal(0.0, config.feature_noise, size=(n, f))

    tiebreak = rng.random(n)
    order = np.lexsort((tiebreak, ts))
    pos = np.empty(n, dtype=np.int64)
    pos[order] = np.arange(n)
    ring_rows = [np.sort(pos[n_legit + i * config.ring_size : n_legit + (i + 1) * config.ring_size]).tolist()
                 for i in range(config.n_fraud_rings)]
    return Dataset(
        np.arange(n, dtype=np.int64),
        ts[order],
        feats[order],
        label[order],
        ents[order],
        {"config": config.to_dict(), "ring_rows": ring_rows},
    )


def generate(config: DatasetConfig) -> list[TransactionRecord]:
    """Return ``config.n_transactions`` records sorted by timestamp."""
    return generate_dataset(config).records()


# -- splitting ----------------------------------------------------------------


def split_masks(timestamps: np.ndarray, train_frac: float = 0.8, val_frac_of_train: float = 0.1,
                seed: int = 0) -> np.ndarray:
    """Return an int8 split code per row: 0 train, 1 validation, 2 test.

    Rows are ranked by timestamp (stable); the last ``1 - train_frac`` become
    test and a seeded random ``val_frac_of_train`` of the rest become validation.
    """
    timestamps = np.asarray(timestamps)
    n = len(timestamps)
    if n < 10:
        raise SplitError(f"need at least 10 records to split, got {n}")
    if not (0.0 < train_frac <= 1.0) or not (0.0 <= val_frac_of_train < 1.0):
        raise SplitError("train_frac must be in (0, 1] and val_frac_of_train in [0, 1)")
    order = np.argsort(timestamps, kind="stable")
    n_train = int(math.floor(train_frac * n + 1e-9))
    code = np.full(n, 2, dtype=np.int8)
    train_rows = order[:n_train]
    code[train_rows] = 0
    n_val = int(round(val_frac_of_train * n_train))
    if n_val:
        rng = np.random.default_rng(seed)
        code[rng.choice(train_rows, size=n_val, replace=False)] = 1
    return code


def split_by_time(records: Sequence[TransactionRecord], train_frac: float = 0.8,
                  val_frac_of_train: float = 0.1, seed: int = 0):
    """Time-ordered train/validation/test split of a record list."""
    code = split_masks([r.timestamp for r in records], train_frac, val_frac_of_train, seed)
    parts: tuple[list, list, list] = ([], [], [])
    for r, c in zip(records, code):
        parts[c].append(r)
    return parts
