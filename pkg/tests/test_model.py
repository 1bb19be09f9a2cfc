import numpy as np
import pytest

from hetmarl import numerics as nx
from hetmarl.env import Skirmish
from hetmarl.errors import ContractError, FormatError
from hetmarl.graph import ClassTable, NodeClass, StateGraph, build_relations, random_graph
from hetmarl.model import (GraphBatch, ModelConfig, cast_params, compose_weight, encode, forward,
                           gat_layer, infer_config, init_params, load_checkpoint,
                           parameter_count, rgcn_layer, rgcn_layer_dense, save_checkpoint,
                           select_actions)

from oracles import gat_dense, rgcn_dense

TABLE = Skirmish().class_table


def small_cfg(comms="rgcn", frf=False, **kw):
    base = dict(embed_dim=6, encoder_hidden=5, comm_dims=(8, 8, 8, 4), head_hidden=5)
    base.update(kw)
    return ModelConfig(TABLE, comms=comms, frf=frf, **base)


def rgcn_params(rng, din, dout, R, B):
    return {"l.self": nx.Tensor(rng.normal(size=(dout, din))),
            "l.basis": nx.Tensor(rng.normal(size=(B, dout, din))),
            "l.coef": nx.Tensor(rng.normal(size=(R, B)))}


# ---------------------------------------------------------------- encoders


def test_encode_zero_weights_gives_half():
    cfg = ModelConfig(TABLE)
    params = {k: nx.Tensor(np.zeros(v.shape), name=k) for k, v in init_params(cfg, 0).items()}
    _, g, _ = Skirmish().reset(seed=0)
    out = encode(GraphBatch([g], TABLE), params).data
    assert out.shape == (10, 64)
    assert (out == 0.5).all()


def test_encode_identical_features_identical_rows():
    cfg = ModelConfig(TABLE)
    params = init_params(cfg, 1)
    feats = [np.full(5, 0.3), np.full(5, 0.3), np.full(5, 0.7)]
    g = StateGraph.build([0, 0, 2], feats, [], [0, 1])
    out = encode(GraphBatch([g], TABLE), params).data
    np.testing.assert_array_equal(out[0], out[1])


def test_encode_scalar_composition():
    table = ClassTable((NodeClass("a", 1, True, 2),))
    cfg = ModelConfig(table, embed_dim=1, encoder_hidden=1, comm_dims=(1,), head_hidden=1,
                      num_bases=1)
    w, b = [0.7, -1.3, 2.1], [0.2, 0.5, -0.4]
    params = init_params(cfg, 0)
    with nx.precision(np.float64):
        for i in range(3):
            params[f"enc.a.{i}.W"] = nx.Tensor([[w[i]]])
            params[f"enc.a.{i}.b"] = nx.Tensor([b[i]])
        x = 0.9
        g = StateGraph.build([0], [[x]], [], [0])
        out = encode(GraphBatch([g], table), params).data[0, 0]

    def s(v):
        return 1.0 / (1.0 + np.exp(-v))
    expected = s(w[2] * s(w[1] * s(w[0] * x + b[0]) + b[1]) + b[2])
    assert out == pytest.approx(expected, abs=1e-6)


# ---------------------------------------------------------------- basis decomposition


def test_compose_weight_examples():
    V = np.random.default_rng(0).normal(size=(1, 3, 2))
    np.testing.assert_array_equal(compose_weight(np.array([1.0]), V).data, V[0].astype(np.float32))
    V2 = np.stack([np.eye(2), np.eye(2)])
    np.testing.assert_array_equal(compose_weight(np.array([0.0, 0.0]), V2).data, np.zeros((2, 2)))
    np.testing.assert_array_equal(compose_weight(np.array([2.0, -1.0]), V2).data, np.eye(2))


def test_compose_weight_shape_mismatch():
    with pytest.raises(ContractError):
        compose_weight(np.ones(3), np.zeros((2, 2, 2)))


# ---------------------------------------------------------------- RGCN layer


def test_rgcn_isolated_agent_with_zero_self_weight():
    g = StateGraph.build([0, 2], [np.zeros(5), np.zeros(5)], [], [0])
    rng = np.random.default_rng(0)
    p = rgcn_params(rng, 3, 3, 8, 2)
    p["l.self"] = nx.Tensor(np.zeros((3, 3)))
    out = rgcn_layer(GraphBatch([g], TABLE), nx.Tensor(rng.normal(size=(2, 3))), p, "l").data
    np.testing.assert_allclose(out[0], 0.5)


def test_rgcn_two_neighbors_are_averaged():
    rel = build_relations(TABLE)
    r = rel[(0, 2)]
    g = StateGraph.build([0, 2, 2], [np.zeros(5)] * 3, [(1, 0, r), (2, 0, r)], [0])
    H = np.array([[0.0, 0.0], [1.0, 3.0], [2.0, -1.0]])
    coef = np.zeros((8, 1))
    coef[r, 0] = 1.0
    with nx.precision(np.float64):
        p = {"l.self": nx.Tensor(np.zeros((2, 2))), "l.basis": nx.Tensor(np.eye(2)[None]),
             "l.coef": nx.Tensor(coef)}
        out = rgcn_layer(GraphBatch([g], TABLE), nx.Tensor(H), p, "l").data
    np.testing.assert_allclose(out[0], 1.0 / (1.0 + np.exp(-np.array([1.5, 1.0]))))
    # entity rows pass through at equal width
    np.testing.assert_array_equal(out[1:], H[1:])


@pytest.mark.parametrize("seed", range(25))
def test_rgcn_matches_bruteforce_oracle(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(TABLE, int(rng.integers(1, 7)), rng)
    din, dout = (3, 3) if seed % 2 else (3, 4)
    with nx.precision(np.float64):
        p = rgcn_params(rng, din, dout, 8, 3)
        H = rng.normal(size=(g.num_nodes, din))
        got = rgcn_layer(GraphBatch([g], TABLE), nx.Tensor(H), p, "l").data
    want = rgcn_dense(g, TABLE, H, p["l.self"].data, p["l.basis"].data, p["l.coef"].data)
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_one_hot_bases_equal_independent_matrices():
    rng = np.random.default_rng(3)
    for _ in range(10):
        g = random_graph(TABLE, 6, rng)
        with nx.precision(np.float64):
            p = rgcn_params(rng, 4, 4, 8, 8)
            p["l.coef"] = nx.Tensor(np.eye(8))
            H = nx.Tensor(rng.normal(size=(6, 4)))
            batch = GraphBatch([g], TABLE)
            a = rgcn_layer(batch, H, p, "l").data
            b = rgcn_layer_dense(batch, H, [nx.Tensor(p["l.basis"].data[r]) for r in range(8)],
                                 p["l.self"]).data
        np.testing.assert_allclose(a, b, atol=1e-6)


def test_fewer_bases_means_fewer_parameters():
    full = init_params(ModelConfig(TABLE, num_bases=8), 0)
    half = init_params(ModelConfig(TABLE, num_bases=4), 0)
    per_relation = sum(8 * w.shape[0] * w.shape[1] + w.size for k, w in full.items()
                       if k.endswith(".self"))
    assert parameter_count(half, "comm.") < parameter_count(full, "comm.")
    assert parameter_count(half, "comm.") < per_relation


# ---------------------------------------------------------------- GAT layer


def gat_params(rng, din, dout, heads):
    return {"l.proj": nx.Tensor(rng.normal(size=(dout, din))),
            "l.att_src": nx.Tensor(rng.normal(size=(heads, dout // heads))),
            "l.att_dst": nx.Tensor(rng.normal(size=(heads, dout // heads)))}


def test_gat_isolated_agent_attends_to_itself():
    g = StateGraph.build([0, 2], [np.zeros(5), np.zeros(5)], [], [0])
    rng = np.random.default_rng(0)
    _, att = gat_layer(GraphBatch([g], TABLE), nx.Tensor(rng.normal(size=(2, 8))),
                       gat_params(rng, 8, 8, 4), "l")
    self_rows = (att.src == 0) & (att.dst == 0)
    np.testing.assert_allclose(att.weights.data[self_rows], 1.0)


def test_gat_identical_logits_are_uniform():
    rel = build_relations(TABLE)
    g = StateGraph.build([0, 2, 2], [np.zeros(5)] * 3,
                         [(1, 0, rel[(0, 2)]), (2, 0, rel[(0, 2)])], [0])
    rng = np.random.default_rng(0)
    p = gat_params(rng, 4, 4, 2)
    p["l.att_src"] = nx.Tensor(np.zeros((2, 2)))
    p["l.att_dst"] = nx.Tensor(np.zeros((2, 2)))
    _, att = gat_layer(GraphBatch([g], TABLE), nx.Tensor(rng.normal(size=(3, 4))), p, "l")
    into0 = att.dst == 0
    np.testing.assert_allclose(att.weights.data[into0], 1.0 / 3.0, atol=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_gat_matches_dense_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    g = random_graph(TABLE, 4, rng, arc_prob=0.8)
    din, dout = (4, 4) if seed % 2 else (4, 8)
    with nx.precision(np.float64):
        p = gat_params(rng, din, dout, 2)
        H = rng.normal(size=(4, din))
        out, att = gat_layer(GraphBatch([g], TABLE), nx.Tensor(H), p, "l")
    want, weights = gat_dense(g, TABLE, H, p["l.proj"].data, p["l.att_src"].data,
                              p["l.att_dst"].data)
    np.testing.assert_allclose(out.data, want, atol=1e-6)
    sums = np.zeros((4, 2))
    np.add.at(sums, att.dst, att.weights.data)
    np.testing.assert_allclose(sums, 1.0, atol=1e-6)
    assert (att.weights.data >= 0).all()
    for k, (s, d) in enumerate(zip(att.src, att.dst)):
        for h in range(2):
            assert att.weights.data[k, h] == pytest.approx(weights[(int(d), h)][int(s)], abs=1e-9)


# ---------------------------------------------------------------- full forward


@pytest.mark.parametrize("comms,frf", [("rgcn", False), ("rgcn", True), ("gat", False),
                                       ("gat", True)])
def test_permutation_invariance(comms, frf):
    cfg = small_cfg(comms, frf)
    rng = np.random.default_rng(7)
    with nx.precision(np.float64):
        params = init_params(cfg, rng)
        for _ in range(10):
            g = random_graph(TABLE, int(rng.integers(2, 9)), rng)
            perm = rng.permutation(g.num_nodes)
            q = forward(g, params, cfg).per_agent(0)
            qp = forward(g.permuted(perm), params, cfg).per_agent(0)
            for a, v in q.items():
                np.testing.assert_allclose(qp[int(perm[a])], v, atol=1e-9)


def test_identical_agents_identical_q():
    cfg = ModelConfig(TABLE)
    params = init_params(cfg, 0)
    rel = build_relations(TABLE)
    feats = [np.full(4, 0.5), np.full(4, 0.5), np.full(5, 0.2)]
    arcs = [(2, 0, rel[(1, 2)]), (2, 1, rel[(1, 2)])]
    g = StateGraph.build([1, 1, 2], feats, arcs, [0, 1])
    q = forward(g, params, cfg).per_agent(0)
    np.testing.assert_array_equal(q[0], q[1])


def test_frf_widths_on_env_graph():
    _, g, _ = Skirmish().reset(seed=0)
    for frf, width in ((False, 64), (True, 448)):
        cfg = ModelConfig(TABLE, frf=frf)
        params = init_params(cfg, 0)
        assert cfg.observation_dim == width
        assert params["head.ranged.0.W"].shape == (128, width)
        q = forward(g, params, cfg).per_agent(0)
        assert sorted(q) == [0, 1, 2, 3, 4] and all(v.shape == (10,) for v in q.values())


def test_forward_rejects_invalid_graph():
    g = StateGraph.build([2], [np.zeros(5)], [], [])
    with pytest.raises(ContractError, match="no agent nodes"):
        forward(g, init_params(small_cfg(), 0), small_cfg())


def test_batched_forward_matches_single():
    cfg = small_cfg()
    rng = np.random.default_rng(2)
    params = init_params(cfg, rng)
    graphs = [random_graph(TABLE, 6, rng) for _ in range(4)]
    out = forward(graphs, params, cfg)
    for i, g in enumerate(graphs):
        single = forward(g, params, cfg).per_agent(0)
        for a, v in out.per_agent(i).items():
            np.testing.assert_allclose(v, single[a], atol=1e-5)


def test_full_network_gradcheck_small_graph():
    from hetmarl.model import network_gradient_error
    rng = np.random.default_rng(0)
    g = random_graph(TABLE, 5, rng)
    assert network_gradient_error([g], small_cfg(), rng) < 1e-4
    assert network_gradient_error([g], small_cfg("gat", True), rng) < 1e-4


# ---------------------------------------------------------------- action selection


def test_select_actions_greedy_and_masked():
    rng = np.random.default_rng(0)
    q = {0: np.array([1.0, 5.0, 3.0])}
    assert select_actions(q, {0: np.ones(3, bool)}, 0.0, rng) == {0: 1}
    assert select_actions(q, {0: np.array([True, False, True])}, 0.0, rng) == {0: 2}
    assert select_actions({0: np.zeros(3)}, {0: np.ones(3, bool)}, 0.0, rng) == {0: 0}


def test_select_actions_uniform_exploration():
    rng = np.random.default_rng(1)
    mask = np.array([True, True, False, True, True])
    q = {0: np.arange(5.0)}
    draws = np.array([select_actions(q, {0: mask}, 1.0, rng)[0] for _ in range(100_000)])
    for k in (0, 1, 3, 4):
        assert abs(np.mean(draws == k) - 0.25) < 0.01
    assert not (draws == 2).any()


def test_select_actions_all_invalid():
    with pytest.raises(ContractError):
        select_actions({0: np.zeros(2)}, {0: np.zeros(2, bool)}, 0.0, np.random.default_rng())


# ---------------------------------------------------------------- checkpoints


@pytest.mark.parametrize("comms,frf", [("rgcn", False), ("gat", True)])
def test_checkpoint_round_trip(tmp_path, comms, frf):
    cfg = ModelConfig(TABLE, comms=comms, frf=frf)
    params = init_params(cfg, 5)
    path = tmp_path / "p.hmagq"
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    assert list(loaded) == list(params)
    for k in params:
        assert loaded[k].data.tobytes() == params[k].data.tobytes()
    assert infer_config(loaded, TABLE) == cfg
    assert path.read_bytes().startswith(b"HMAGQ1")


def test_corrupt_checkpoint_reports_offset(tmp_path):
    params = init_params(small_cfg(), 0)
    path = tmp_path / "p.hmagq"
    save_checkpoint(path, params)
    raw = path.read_bytes()
    path.write_bytes(raw[:len(raw) - 7])
    with pytest.raises(FormatError, match="offset"):
        load_checkpoint(path)
    path.write_bytes(b"NOTIT" + raw[5:])
    with pytest.raises(FormatError, match="offset 0"):
        load_checkpoint(path)


def test_float64_params_checkpoint_as_float32(tmp_path):
    params = cast_params(init_params(small_cfg(), 0), np.float64)
    save_checkpoint(tmp_path / "p", params)
    loaded = load_checkpoint(tmp_path / "p")
    assert all(v.data.dtype == np.float32 for v in loaded.values())
