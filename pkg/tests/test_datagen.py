import numpy as np
import pytest
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from lambdafraud.datagen import (
    N_ENTITY_TYPES, ConfigError, Dataset, DatasetConfig, EntityKey, EntityType, SplitError, TransactionRecord,
    generate, generate_dataset, split_by_time, split_masks,
)


def test_empty_config_gives_empty_list():
    assert generate(DatasetConfig(n_transactions=0)) == []


def test_same_config_same_bytes(tmp_path):
    cfg = DatasetConfig(n_transactions=1000, fraud_ratio=0.025, seed=7, n_fraud_rings=2, ring_size=5)
    a, b = generate_dataset(cfg), generate_dataset(cfg)
    assert a.to_bytes() == b.to_bytes()
    assert generate(cfg) == generate(cfg)
    a.to_jsonl(tmp_path / "a.jsonl")
    b.to_jsonl(tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert generate_dataset(DatasetConfig(n_transactions=1000, seed=8, n_fraud_rings=2, ring_size=5)).to_bytes() != a.to_bytes()


def test_single_ring_shares_an_entity():
    cfg = DatasetConfig(n_transactions=2000, n_fraud_rings=1, ring_size=5, seed=3)
    d = generate_dataset(cfg)
    ring = np.array(d.meta["ring_rows"][0])
    assert d.label[ring].all()
    assert len(ring) == 5
    ents = d.entities[ring]
    shared = [t for t in range(N_ENTITY_TYPES) if (ents[:, t] >= 0).all() and len(set(ents[:, t])) == 1]
    assert shared, "ring members should share a key of some type"
    assert EntityType.DeviceID in shared or EntityType.PaymentToken in shared


def test_records_sorted_and_valid():
    recs = generate(DatasetConfig(n_transactions=3000, seed=1, n_fraud_rings=2, ring_size=10))
    ts = [r.timestamp for r in recs]
    assert ts == sorted(ts)
    assert len({r.txn_id for r in recs}) == len(recs)
    for r in recs:
        assert 1 <= len(r.entities) <= N_ENTITY_TYPES
        assert len({e.entity_type for e in r.entities}) == len(r.entities)
        assert r.label in (0, 1) and len(r.features) == 16


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_fraud_fraction_within_half_point(seed):
    d = generate_dataset(DatasetConfig(n_transactions=20000, seed=seed))
    assert abs(d.label.mean() - 0.025) <= 0.005


def test_rings_connected_in_static_graph():
    d = generate_dataset(DatasetConfig(n_transactions=5000, n_fraud_rings=4, ring_size=10, seed=5))
    rows, types = np.nonzero(d.entities >= 0)
    code = types.astype(np.int64) * (1 << 40) + d.entities[rows, types]
    _, ent = np.unique(code, return_inverse=True)
    n = len(d) + ent.max() + 1
    adj = coo_matrix((np.ones(len(rows)), (rows, len(d) + ent)), shape=(n, n))
    _, comp = connected_components(adj, directed=False)
    for ring in d.meta["ring_rows"]:
        assert len(set(comp[ring])) == 1


def test_tabular_signal_is_imperfect():
    from lambdafraud.encoder import GBDTParams, train_gbdt
    from lambdafraud.metrics import average_precision

    d = generate_dataset(DatasetConfig(n_transactions=10000, seed=4))
    code = split_masks(d.timestamp)
    m = train_gbdt(d.features[code == 0], d.label[code == 0], GBDTParams(n_trees=32))
    ap = average_precision(m.predict(d.features[code == 2]), d.label[code == 2])
    assert 0.05 < ap < 0.9


@pytest.mark.parametrize("bad", [
    dict(n_transactions=-1), dict(n_days=0), dict(fraud_ratio=0.0), dict(fraud_ratio=1.0),
    dict(feature_dim=0), dict(n_fraud_rings=100, ring_size=100), dict(entity_pool_sizes={"Email": 0}),
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        generate(DatasetConfig(**bad))


def test_split_last_twenty_percent_is_test():
    recs = [TransactionRecord(i, i, (0.0,), 0, (EntityKey(EntityType.Email, i),)) for i in range(100)]
    train, val, test = split_by_time(recs, seed=3)
    assert sorted(r.timestamp for r in test) == list(range(80, 100))
    assert len(val) == 8 and len(train) == 72
    ids = [r.txn_id for r in train + val + test]
    assert sorted(ids) == list(range(100))
    again = split_by_time(recs, seed=3)[1]
    assert [r.txn_id for r in again] == [r.txn_id for r in val]


def test_split_full_train():
    recs = [TransactionRecord(i, i, (0.0,), 0, ()) for i in range(20)]
    train, val, test = split_by_time(recs, train_frac=1.0, val_frac_of_train=0.0)
    assert (len(train), len(val), len(test)) == (20, 0, 0)


def test_split_too_small():
    with pytest.raises(SplitError):
        split_masks(np.arange(9))


def test_text_and_binary_forms_round_trip(tmp_path):
    d = generate_dataset(DatasetConfig(n_transactions=300, seed=2, n_fraud_rings=1, ring_size=5))
    d.to_jsonl(tmp_path / "d.jsonl")
    d.save(tmp_path / "d.lfds")
    for path in ("d.jsonl", "d.lfds"):
        back = Dataset.load(tmp_path / path)
        assert np.array_equal(back.features, d.features)
        assert np.array_equal(back.entities, d.entities)
        assert np.array_equal(back.label, d.label) and np.array_equal(back.timestamp, d.timestamp)
    assert Dataset.from_records(d.records()).to_bytes()[:4] == b"LFDS"


def test_record_validation():
    with pytest.raises(ValueError):
        TransactionRecord(0, 0, (0.0,), 2, ())
    with pytest.raises(ValueError):
        TransactionRecord(0, -1, (0.0,), 0, ())
    with pytest.raises(ValueError):
        TransactionRecord(0, 0, (0.0,), 0, (EntityKey(EntityType.IP, 1), EntityKey(EntityType.IP, 2)))
