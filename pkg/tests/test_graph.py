import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lambdafraud.datagen import DatasetConfig, EntityKey, EntityType, TransactionRecord, generate_dataset
from lambdafraud.graph import (
    ENTITY, REFERENCE, TARGET, InputError, Partition, TDGraph, ViolationKind, build_snapshot, build_static,
    first_fit_decreasing, graph_accesses, make_minibatches, transform, validate_leakage_freedom,
)

from oracles import naive_snapshot, naive_static, naive_td, partition_as_sets, reachable_to

P = EntityKey(EntityType.Phone, 1)
Q = EntityKey(EntityType.Email, 2)
E = EntityKey(EntityType.Email, 9)


def rec(i, day, ents, label=0):
    return TransactionRecord(i, day, (float(i), 0.0), label, tuple(ents))


@st.composite
def record_lists(draw, max_n=25, max_day=6, max_key=3):
    n = draw(st.integers(0, max_n))
    ids = draw(st.permutations(list(range(100, 100 + n))))
    out = []
    for i in range(n):
        types = draw(st.lists(st.sampled_from(list(EntityType)), unique=True, max_size=4))
        ents = tuple(EntityKey(t, draw(st.integers(0, max_key))) for t in types)
        out.append(rec(ids[i], draw(st.integers(0, max_day)), ents, draw(st.integers(0, 1))))
    out.sort(key=lambda r: r.timestamp)
    return out


# -- static --------------------------------------------------------------------------


def test_static_examples():
    g = build_static([])
    assert (g.n_nodes, g.n_edges) == (0, 0)
    g = build_static([rec(1, 0, [E]), rec(2, 0, [E])])
    assert (g.n_txn, g.n_entities, g.n_edges) == (2, 1, 2)
    g = build_static([rec(1, 0, [P, E, EntityKey(EntityType.IP, 4)])])
    td, de = g.degrees()
    assert td.tolist() == [3] and de.tolist() == [1, 1, 1]


def test_static_duplicate_id():
    with pytest.raises(InputError):
        build_static([rec(1, 0, [E]), rec(1, 1, [P])])


@given(record_lists())
def test_static_matches_set_oracle(records):
    txns, ents, edges = naive_static(records)
    g = build_static(records)
    assert set(g.txn_id.tolist()) == txns
    assert {g.entity(i) for i in range(g.n_entities)} == ents
    got = {(int(g.txn_id[t]), g.entity(e)) for t, e in zip(g.edge_txn, g.edge_entity)}
    assert got == edges and g.n_edges == len(edges)


# -- snapshot ------------------------------------------------------------------------


def test_snapshot_examples():
    s = build_snapshot([rec(1, 0, [P, E])])
    assert s.n_nodes == 3 and set(s.inst_day.tolist()) == {0} and s.edge_role.tolist() == [0, 0]
    s = build_snapshot([rec(10, 1, [P]), rec(20, 3, [P])])
    assert sorted(s.inst_day.tolist()) == [1, 3]
    assert s.has_edge(10, P, 3)
    assert not s.has_edge(20, P, 1)


@given(record_lists(), st.one_of(st.none(), st.integers(1, 4)))
def test_snapshot_matches_set_oracle(records, h):
    inst, edges = naive_snapshot(records, h)
    s = build_snapshot(records, max_history=h)
    st_ = s.static
    got_inst = {(st_.entity(int(e)), int(d)) for e, d in zip(s.inst_entity, s.inst_day)}
    assert got_inst == inst
    got = {(int(st_.txn_id[t]), st_.entity(int(s.inst_entity[i])), int(s.inst_day[i]))
           for t, i in zip(s.edge_txn, s.edge_inst)}
    assert got == edges and s.n_edges == len(edges)
    assert s.n_nodes >= st_.n_nodes


# -- TD ----------------------------------------------------------------------------------


def test_td_single_day_has_no_references():
    td = transform([rec(1, 4, [P]), rec(2, 4, [P, E])])
    (p,) = td.partitions
    assert len(p.references) == 0 and len(p.targets) == 2 and len(p.entities) == 2


def test_td_manual_trace():
    td = transform([rec(1, 1, [P], label=1), rec(2, 3, [P])], max_history=30)
    p3 = partition_as_sets(td, td.partition(3))
    assert p3 == {"targets": {2}, "refs": {1}, "entities": {P}, "batch": {(1, P)}, "rt": {(P, 2)}}
    p1 = partition_as_sets(td, td.partition(1))
    assert p1["targets"] == {1} and p1["refs"] == set()
    # txn 1 is a target on day 1 and a reference on day 3
    roles = [(p.day, int(p.node_kind[p.local_index(k, 0)])) for p in td.partitions
             for k in (TARGET, REFERENCE) if np.any((p.node_kind == k) & (p.node_ref == 0))]
    assert roles == [(1, TARGET), (3, REFERENCE)]


def test_window_truncated_at_day_zero_and_bounded():
    recs = [rec(1, 0, [P]), rec(2, 2, [P]), rec(3, 9, [P])]
    td = transform(recs, max_history=3)
    assert td.partition(2).window == (0, 2)
    assert partition_as_sets(td, td.partition(2))["refs"] == {1}
    assert td.partition(9).window == (6, 9)
    assert partition_as_sets(td, td.partition(9))["refs"] == set()


@given(record_lists(), st.integers(1, 5))
def test_td_matches_set_oracle(records, h):
    want = naive_td(records, h)
    td = transform(records, max_history=h)
    assert {p.day for p in td.partitions} == set(want)
    for p in td.partitions:
        assert partition_as_sets(td, p) == want[p.day]


@given(record_lists(), st.integers(1, 5))
def test_td_structural_invariants(records, h):
    td = transform(records, max_history=h)
    s = build_snapshot(records, max_history=h)
    assert s.n_nodes >= s.static.n_nodes
    assert td.n_nodes >= s.n_nodes and td.n_edges >= s.n_edges
    seen_targets = []
    for p in td.partitions:
        k = p.node_kind
        seen_targets += p.node_ref[k == TARGET].tolist()
        assert not set(p.node_ref[k == TARGET].tolist()) & set(p.node_ref[k == REFERENCE].tolist())
        if len(p.rt_edges):
            assert (k[p.rt_edges[:, 0]] == ENTITY).all() and (k[p.rt_edges[:, 1]] == TARGET).all()
        if len(p.batch_edges):
            assert (k[p.batch_edges] != TARGET).all()
        for t in p.targets:
            for u in reachable_to(p.n_nodes, p.rt_edges.tolist(), p.batch_edges.tolist(), int(t)):
                assert k[u] != TARGET
                if k[u] != ENTITY:
                    assert p.node_time[u] < p.node_time[t]
    assert sorted(seen_targets) == list(range(len(records)))
    assert validate_leakage_freedom(td).ok


def test_td_is_pure_and_byte_stable():
    d = generate_dataset(DatasetConfig(n_transactions=2000, n_days=15, n_fraud_rings=2, ring_size=10, seed=9))
    assert transform(d, 7).to_bytes() == transform(d, 7).to_bytes()


def test_entity_less_transactions_are_still_targets():
    td = transform([rec(1, 0, []), rec(2, 0, [P]), rec(3, 2, [])])
    assert sorted(int(r) for p in td.partitions for r in p.node_ref[p.targets]) == [0, 1, 2]


def test_save_load_round_trip(tmp_path, small):
    small.td.save(tmp_path / "g.lftd")
    back = TDGraph.load(tmp_path / "g.lftd")
    assert back.to_bytes() == small.td.to_bytes()
    assert np.array_equal(back.split, small.td.split)
    assert "static" in back.summary_table()


# -- validation ---------------------------------------------------------------------------


def _toy():
    # nodes: 0 ref(day1) 1 entity 2 target(day3)
    return Partition(3, [REFERENCE, ENTITY, TARGET], [0, 0, 1], [1, 3, 3], [[0, 1]], [[1, 2]])


def test_validator_accepts_clean_toy():
    assert validate_leakage_freedom([_toy()]).ok


def test_validator_flags_reversed_rt_edge():
    p = _toy()
    p.rt_edges = np.array([[2, 1]])
    rep = validate_leakage_freedom([p])
    assert rep.count(ViolationKind.ReversedRTEdge) == 1 and len(rep.violations) == 1


def test_validator_flags_future_reference():
    p = _toy()
    p.node_time = np.array([4, 3, 3])
    rep = validate_leakage_freedom([p])
    assert rep.count(ViolationKind.FutureReference) == 1 and len(rep.violations) == 1


def test_validator_flags_target_batch_edge_and_target_paths():
    p = Partition(3, [TARGET, ENTITY, TARGET], [0, 0, 1], [3, 3, 3], [[0, 1]], [[1, 2]])
    rep = validate_leakage_freedom([p])
    assert rep.count(ViolationKind.TargetBatchEdge) == 1
    assert rep.count(ViolationKind.TargetTargetPath) == 1


def test_validator_on_generated_data():
    d = generate_dataset(DatasetConfig(n_transactions=10000, n_days=40, n_fraud_rings=8, ring_size=20, seed=1))
    assert validate_leakage_freedom(transform(d, 30)).violations == []


# -- mini-batches -------------------------------------------------------------------------


def test_ffd_example():
    bins = first_fit_decreasing([5, 4, 3, 2], 7)
    assert [sorted([5, 4, 3, 2][i] for i in b) for b in bins] == [[2, 5], [3, 4]]


def test_single_component_one_batch():
    mbs = make_minibatches(_toy(), 10)
    assert len(mbs) == 1 and mbs[0].nodes.tolist() == [0, 1, 2]


@settings(max_examples=60)
@given(record_lists(max_n=40, max_key=6), st.integers(1, 12))
def test_minibatches_cover_targets_and_respect_budget(records, budget):
    td = transform(records, 3, budget)
    for pi, p in enumerate(td.partitions):
        mbs = make_minibatches(p, budget)
        nodes = np.concatenate([m.nodes for m in mbs]) if mbs else np.zeros(0, int)
        assert sorted(nodes.tolist()) == list(range(p.n_nodes))
        assert all(m.size <= budget for m in mbs)
        tg = [int(v) for m in mbs for v in m.nodes if p.node_kind[v] == TARGET]
        assert sorted(tg) == p.targets.tolist()


def test_skeleton_reads_are_counted():
    p = _toy()
    before = graph_accesses.count
    p.skeleton()
    p.skeleton()
    assert graph_accesses.count == before + 2
