import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lambdafraud.graph import ENTITY, REFERENCE, TARGET, Partition
from lambdafraud.nn import (
    Adam, ContractError, LNNModel, ShapeError, TrainBatch, TrainConfig, TrainingError, conv_layer, decode,
    forward, loss_and_grad, prepare, rt_net_forward, rt_single, train,
)

from oracles import dense_lnn


def random_partition(rng, n_nodes=None, p_edge=0.3):
    n = int(rng.integers(1, 33)) if n_nodes is None else n_nodes
    kind = rng.choice([TARGET, REFERENCE, ENTITY], size=n)
    refs_or_ents = lambda k: np.nonzero(kind == k)[0]
    be = [(r, e) for r in refs_or_ents(REFERENCE) for e in refs_or_ents(ENTITY) if rng.random() < p_edge]
    rt = [(e, t) for e in refs_or_ents(ENTITY) for t in refs_or_ents(TARGET) if rng.random() < p_edge]
    time = np.where(kind == REFERENCE, 0, 1)
    return Partition(1, kind, np.arange(n), time, be, rt)


def random_model(rng, in_dim=3, hidden=4, layers=2):
    m = LNNModel.init(in_dim, hidden, layers, seed=int(rng.integers(1 << 30)))
    for k in m.params:
        if k.endswith(".b"):
            m.params[k] = rng.normal(scale=0.3, size=m.params[k].shape)
    return m


def inputs(gb, x):
    return x[gb.ref_rows], x[gb.target_rows]


def test_forward_matches_dense_oracle_on_random_graphs():
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(150):
        p = random_partition(rng)
        layers = int(rng.integers(0, 4))
        model = random_model(rng, layers=layers)
        x = rng.normal(size=(p.n_nodes, 3))
        gb = prepare(p)
        tr = forward(model, gb, *inputs(gb, x))
        want = dense_lnn(model.params, layers, p, lambda r: x[r])
        ents = np.nonzero(p.node_kind == ENTITY)[0]
        for j, v in enumerate(ents):
            np.testing.assert_allclose(tr.entity_states[j], want["entities"][v], atol=1e-6, rtol=0)
        for j, t in enumerate(p.targets):
            assert abs(tr.scores[j] - want["scores"][t]) <= 1e-6
            checked += 1
    assert checked >= 100


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    p = random_partition(rng, n_nodes=10, p_edge=0.6)
    while len(p.targets) < 2 or len(p.references) < 2 or len(p.rt_edges) < 2:
        p = random_partition(rng, n_nodes=10, p_edge=0.6)
    model = random_model(rng, layers=2)
    gb = prepare(p)
    x = rng.normal(size=(p.n_nodes, 3))
    xr, xt = inputs(gb, x)
    y = rng.integers(0, 2, gb.n_targets)
    _, grads = loss_and_grad(model, gb, xr, xt, y)
    eps = 1e-6
    for k, w in model.params.items():
        fd = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            orig = w[idx]
            w[idx] = orig + eps
            lp = loss_and_grad(model, gb, xr, xt, y)[0]
            w[idx] = orig - eps
            lm = loss_and_grad(model, gb, xr, xt, y)[0]
            w[idx] = orig
            fd[idx] = (lp - lm) / (2 * eps)
        denom = max(np.linalg.norm(fd) + np.linalg.norm(grads[k]), 1e-12)
        assert np.linalg.norm(fd - grads[k]) / denom <= 1e-4, k


def test_zero_weights_pass_residual_through():
    h = np.arange(6.0).reshape(3, 2)
    out = conv_layer(h, [[0, 1]], np.zeros((2, 2)))
    assert np.array_equal(out, h)


def test_isolated_node_keeps_relu_of_itself():
    h = np.array([[1.0, -2.0], [3.0, 4.0]])
    w = np.eye(2)
    out = conv_layer(h, np.zeros((0, 2)), w)
    np.testing.assert_array_equal(out, np.maximum(h, 0) + h)


def test_conv_layer_shape_errors():
    with pytest.raises(ShapeError):
        conv_layer(np.zeros((2, 3)), [], np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        conv_layer(np.zeros((2, 2)), [], np.zeros((2, 3)))


def test_zero_batch_layers_leave_entities_at_bias():
    model = random_model(np.random.default_rng(2), layers=0)
    p = Partition(1, [REFERENCE, ENTITY, TARGET], [0, 1, 2], [0, 1, 1], [[0, 1]], [[1, 2]])
    gb = prepare(p)
    tr = forward(model, gb, np.ones((1, 3)), np.ones((1, 3)))
    np.testing.assert_array_equal(tr.entity_states[0], model.params["in.b"])


def test_target_without_entities_uses_only_its_projection():
    model = random_model(np.random.default_rng(3))
    x = np.array([[0.2, -0.4, 1.0]])
    ph = x @ model.params["phi.w"] + model.params["phi.b"]
    want = np.maximum(ph @ model.params["rt.w"] + model.params["rt.b"], 0) + ph
    np.testing.assert_allclose(rt_net_forward(model, x, np.zeros((0, 4)), []), want, rtol=1e-15)
    np.testing.assert_allclose(rt_single(model.params, x[0], np.zeros((0, 4))), want[0], rtol=1e-15)


def test_decode_examples():
    m = LNNModel.init(2, 3, 0)
    m.params["dec.w"] = np.array([1.0, -2.0, 0.5])
    assert decode(m, np.zeros(3)) == 0.0
    assert decode(m, np.array([[1.0, 1.0, 2.0]])).tolist() == [0.0]
    assert decode(m, np.array([2.0, 0.0, 0.0])) == 2.0


def test_rt_single_agrees_with_batched_rt():
    rng = np.random.default_rng(4)
    model = random_model(rng)
    ent = rng.normal(size=(5, 4))
    x = rng.normal(size=(3, 3))
    edges = [(0, 0), (3, 0), (1, 1), (2, 1), (4, 1)]
    batched = rt_net_forward(model, x, ent, edges)
    for t, es in enumerate([[0, 3], [1, 2, 4], []]):
        np.testing.assert_allclose(rt_single(model.params, x[t], ent[es]), batched[t], rtol=1e-13)


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    p = random_partition(rng)
    model = random_model(rng)
    x = rng.normal(size=(p.n_nodes, 3))
    perm = rng.permutation(p.n_nodes)
    inv = np.argsort(perm)  # old -> new position
    q = Partition(1, p.node_kind[perm], p.node_ref[perm], p.node_time[perm], inv[p.batch_edges], inv[p.rt_edges])
    s = {}
    for part in (p, q):
        gb = prepare(part)
        tr = forward(model, gb, *inputs(gb, x))
        s[id(part)] = dict(zip(gb.target_rows.tolist(), tr.scores.tolist()))
    a, b = s[id(p)], s[id(q)]
    assert a.keys() == b.keys()
    for k in a:
        assert abs(a[k] - b[k]) <= 1e-12


def test_targets_are_isolated_from_each_other():
    rng = np.random.default_rng(5)
    p = Partition(1, [REFERENCE, ENTITY, TARGET, TARGET], [0, 1, 2, 3], [0, 1, 1, 1], [[0, 1]], [[1, 2], [1, 3]])
    model = random_model(rng)
    gb = prepare(p)
    x = rng.normal(size=(4, 3))
    xr, xt = inputs(gb, x)
    base = forward(model, gb, xr, xt).scores
    xt2 = xt.copy()
    xt2[1] += 5.0
    moved = forward(model, gb, xr, xt2).scores
    assert moved[0] == base[0] and moved[1] != base[1]
    _, _, (_, dxt) = loss_and_grad(model, gb, xr, xt, [1, 0], mask=[True, False], input_grads=True)
    assert np.all(dxt[1] == 0) and np.any(dxt[0] != 0)


def test_prepare_rejects_contract_violations():
    with pytest.raises(ContractError):
        prepare(Partition(1, [TARGET, ENTITY], [0, 1], [1, 1], [[0, 1]], []))
    with pytest.raises(ContractError):
        prepare(Partition(1, [TARGET, ENTITY], [0, 1], [1, 1], [], [[0, 1]]))
    with pytest.raises(ContractError):
        prepare(Partition(1, [REFERENCE, TARGET], [0, 1], [0, 1], [], [[0, 1]]))


def _toy_batches(rng, n_batches=6, split_cycle=(0, 0, 0, 1)):
    out = []
    for i in range(n_batches):
        p = random_partition(rng, n_nodes=20, p_edge=0.3)
        gb = prepare(p)
        x = rng.normal(size=(p.n_nodes, 3))
        xr, xt = inputs(gb, x)
        y = (xt[:, 0] > 0).astype(np.float32)
        split = np.array([split_cycle[(i + j) % len(split_cycle)] for j in range(gb.n_targets)], np.int8)
        out.append(TrainBatch(gb, xr.astype(np.float32), xt.astype(np.float32), y, split))
    return [b for b in out if b.graph.n_targets]


def test_adam_drives_toy_loss_down_by_half():
    rng = np.random.default_rng(6)
    (b,) = _toy_batches(rng, 1)[:1]
    model = LNNModel.init(3, 8, 2, seed=0)
    opt = Adam(model.params, 0.01)
    first = None
    for _ in range(200):
        loss, g = loss_and_grad(model, b.graph, b.x_ref, b.x_tgt, b.labels)
        first = loss if first is None else first
        opt.step(model.params, g)
        model.invalidate()
    assert loss_and_grad(model, b.graph, b.x_ref, b.x_tgt, b.labels)[0] <= 0.5 * first


def test_patience_zero_stops_one_epoch_after_best():
    batches = _toy_batches(np.random.default_rng(7), 8)
    cfg = TrainConfig(learning_rate=0.05, max_epochs=60, patience=0, hidden_dim=8, n_batch_layers=1)
    _, hist = train(None, batches, cfg)
    val = [h["val_loss"] for h in hist]
    # every epoch before the last improves; the last one does not (or we ran out)
    assert all(b < a for a, b in zip(val[:-1], val[1:-1]))
    assert len(hist) == cfg.max_epochs or val[-1] >= min(val[:-1])


def test_training_is_deterministic_and_returns_best():
    batches = _toy_batches(np.random.default_rng(8), 8)
    cfg = TrainConfig(learning_rate=0.02, max_epochs=8, patience=2, hidden_dim=8, n_batch_layers=2, seed=3)
    a, ha = train(None, batches, cfg)
    b, hb = train(None, batches, cfg)
    assert a.to_bytes() == b.to_bytes() and ha == hb
    assert a.meta["best_val_loss"] == min(h["val_loss"] for h in ha)


def test_training_errors():
    with pytest.raises(TrainingError):
        train(None, [], TrainConfig())
    batches = _toy_batches(np.random.default_rng(9), 2, split_cycle=(1,))
    with pytest.raises(TrainingError):
        train(None, batches, TrainConfig(max_epochs=1))


def test_checkpoint_round_trip(tmp_path):
    m = random_model(np.random.default_rng(10))
    m.meta["note"] = {"a": 1}
    m.save(tmp_path / "m.lfnn")
    back = LNNModel.load(tmp_path / "m.lfnn")
    assert back.to_bytes() == m.to_bytes() and back.meta == m.meta
    assert all(np.array_equal(back.params[k], m.params[k]) for k in m.params)


def test_zero_conv_weights_reduce_to_decoded_projection():
    rng = np.random.default_rng(11)
    p = random_partition(rng, n_nodes=20, p_edge=0.5)
    while not len(p.targets):
        p = random_partition(rng, n_nodes=20, p_edge=0.5)
    model = random_model(rng, layers=3)
    for k in model.params:
        if k.startswith(("batch.", "rt.")):
            model.params[k] = np.zeros_like(model.params[k])
    gb = prepare(p)
    x = rng.normal(size=(p.n_nodes, 3))
    xr, xt = inputs(gb, x)
    want = (xt @ model.params["phi.w"] + model.params["phi.b"]) @ model.params["dec.w"]
    assert np.array_equal(forward(model, gb, xr, xt).scores, want)
