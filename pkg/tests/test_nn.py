"""Building-block contracts: MLP, attention, timestep embedding, init."""

import math

import numpy as np
import pytest

from touchgate.autodiff import Graph, ShapeError, Tensor
from touchgate.gradcheck import finite_diff_check
from touchgate.nn import (AttentionBlock, Linear, MLP, ParamStore, attention_forward,
                          fanin_uniform, init_params, mlp_forward, modulate,
                          timestep_embed)
from touchgate.rng import Rng


def const(g, x):
    return g.constant(np.asarray(x))


# ---- param store ----------------------------------------------------------------


def test_store_rejects_duplicates_and_orders_names():
    s = ParamStore()
    s.add("b", np.zeros(2))
    s.add("a", np.zeros(2))
    with pytest.raises(ValueError):
        s.add("a", np.zeros(2))
    assert s.names() == ["b", "a"]  # insertion order, not sorted


def test_store_state_roundtrip_and_freeze():
    s = ParamStore()
    rng = Rng(0)
    Linear(s, "enc.lin", 3, 2, rng)
    Linear(s, "head", 2, 1, rng)
    sd = s.state_dict()
    s2 = ParamStore()
    rng2 = Rng(99)
    Linear(s2, "enc.lin", 3, 2, rng2)
    Linear(s2, "head", 2, 1, rng2)
    s2.load_state_dict(sd)
    for k in sd:
        np.testing.assert_array_equal(s2.get(k).data, sd[k])
    assert s.freeze("enc.") == 2
    assert s.get("enc.lin.weight").frozen and not s.get("head.weight").frozen


def test_store_load_rejects_mismatch():
    s = ParamStore()
    s.add("w", np.zeros((2, 2)))
    with pytest.raises(ValueError):
        s.load_state_dict({"w": np.zeros((2, 2)), "extra": np.zeros(1)})
    with pytest.raises(ValueError):
        s.load_state_dict({"w": np.zeros((3, 2))})


# ---- linear / MLP -----------------------------------------------------------------


def _manual_linear(store, name, w, b):
    lin = Linear.__new__(Linear)
    lin.d_in, lin.d_out = w.shape
    lin.weight = store.add(name + ".weight", w)
    lin.bias = store.add(name + ".bias", b)
    return lin


def store64():
    return ParamStore(dtype=np.float64)


def test_mlp_identity_layer_passes_input_through():
    s = store64()
    lin = _manual_linear(s, "l", np.eye(3), np.zeros(3))
    g = Graph(dtype=np.float64)
    x = const(g, [[1.0, -2.0, 0.5]])
    out = mlp_forward(g, [lin], "gelu", x)
    np.testing.assert_array_equal(out.data, x.data)


def test_mlp_zero_weights_yield_bias_rows():
    s = store64()
    lin = _manual_linear(s, "l", np.zeros((3, 2)), np.array([0.7, -0.1]))
    g = Graph(dtype=np.float64)
    out = mlp_forward(g, [lin], "gelu", const(g, np.random.default_rng(0).normal(size=(5, 3))))
    np.testing.assert_allclose(out.data, np.tile([0.7, -0.1], (5, 1)), rtol=1e-7)


def test_mlp_two_layer_matches_hand_computation():
    w1 = np.array([[1.0, 0.0], [0.0, 2.0]])
    b1 = np.array([0.5, -0.5])
    w2 = np.array([[1.0], [1.0]])
    b2 = np.array([0.25])
    s = store64()
    layers = [_manual_linear(s, "l0", w1, b1), _manual_linear(s, "l1", w2, b2)]
    x = np.array([[1.0, 1.0]])
    g = Graph(dtype=np.float64)
    out = mlp_forward(g, layers, "tanh", const(g, x))
    # hand computation: h = tanh(x @ w1 + b1) = tanh([1.5, 1.5]); y = h @ w2 + 0.25
    h = np.tanh(np.array([1.5, 1.5]))
    assert out.item() == pytest.approx(h.sum() + 0.25, rel=1e-12)


def test_mlp_activation_not_applied_after_last_layer():
    # output can go negative/large, which tanh would squash
    s = store64()
    lin = _manual_linear(s, "l", np.array([[5.0]]), np.zeros(1))
    g = Graph(dtype=np.float64)
    out = mlp_forward(g, [lin], "tanh", const(g, [[2.0]]))
    assert out.item() == pytest.approx(10.0)


def test_linear_rejects_wrong_width():
    s = ParamStore()
    lin = Linear(s, "l", 4, 2, Rng(0))
    g = Graph()
    with pytest.raises(ShapeError):
        lin(g, g.constant(np.ones((3, 5), dtype=np.float32)))


def test_linear_handles_batched_3d_tokens():
    s = ParamStore()
    lin = Linear(s, "l", 4, 3, Rng(5))
    g = Graph()
    x = np.random.default_rng(1).normal(size=(2, 5, 4)).astype(np.float32)
    out = lin(g, g.constant(x))
    assert out.data.shape == (2, 5, 3)
    ref = x.reshape(10, 4) @ lin.weight.data + lin.bias.data
    np.testing.assert_allclose(out.data, ref.reshape(2, 5, 3), rtol=1e-5)


# ---- attention ---------------------------------------------------------------------


def make_attn(seed=0, d=8, n_h=2, mode="cross"):
    s = store64()
    return AttentionBlock(s, "attn", d, n_h, Rng(seed), mode=mode), s


def test_attention_single_key_ignores_queries():
    blk, _ = make_attn()
    g = Graph(dtype=np.float64)
    kv = g.constant(np.random.default_rng(2).normal(size=(1, 8)))
    q1 = g.constant(np.random.default_rng(3).normal(size=(4, 8)))
    q2 = g.constant(np.random.default_rng(4).normal(size=(4, 8)) * 10.0)
    out1, _ = attention_forward(g, blk, q1, kv)
    out2, _ = attention_forward(g, blk, q2, kv)
    np.testing.assert_allclose(out1.data, out2.data, atol=1e-12)
    np.testing.assert_allclose(out1.data[0], out1.data[3], atol=1e-12)


def test_attention_identical_queries_identical_rows():
    blk, _ = make_attn(seed=1)
    g = Graph(dtype=np.float64)
    q = g.constant(np.tile(np.random.default_rng(5).normal(size=(1, 8)), (3, 1)))
    kv = g.constant(np.random.default_rng(6).normal(size=(5, 8)))
    out, _ = attention_forward(g, blk, q, kv)
    np.testing.assert_allclose(out.data[0], out.data[1], atol=1e-12)
    np.testing.assert_allclose(out.data[0], out.data[2], atol=1e-12)


def test_attention_matches_hand_computed_single_head():
    # 1 head, d=2, hand-set projections, 2 kv tokens, 1 query
    s = store64()
    blk = AttentionBlock(s, "a", 2, 1, Rng(0), mode="cross")
    wq = np.array([[1.0, 0.0], [0.0, 1.0]])
    wk = np.array([[0.0, 1.0], [1.0, 0.0]])
    wv = np.array([[2.0, 0.0], [0.0, 2.0]])
    wo = np.array([[1.0, 0.0], [0.0, 1.0]])
    for name, w in (("a.wq", wq), ("a.wk", wk), ("a.wv", wv), ("a.wo", wo)):
        s.get(name + ".weight").data = w.astype(np.float64)
        s.get(name + ".bias").data[:] = 0
    q = np.array([[1.0, 0.0]])
    kv = np.array([[1.0, 0.0], [0.0, 1.0]])
    g = Graph(dtype=np.float64)
    out, w = attention_forward(g, blk, g.constant(q), g.constant(kv), return_weights=True)
    # hand: qp=[1,0]; keys=[[0,1],[1,0]]; scores=[0,1]/sqrt(2); softmax; values=2*kv
    scores = np.array([0.0, 1.0]) / math.sqrt(2.0)
    e = np.exp(scores - scores.max())
    attw = e / e.sum()
    expect = attw @ (2.0 * kv)
    np.testing.assert_allclose(out.data[0], expect, rtol=1e-6)
    np.testing.assert_allclose(w.data[0, 0], attw, rtol=1e-6)


def test_attention_rows_sum_to_one():
    blk, _ = make_attn(seed=7, d=16, n_h=4)
    g = Graph(dtype=np.float64)
    q = g.constant(np.random.default_rng(8).normal(size=(6, 16)) * 5)
    kv = g.constant(np.random.default_rng(9).normal(size=(10, 16)) * 5)
    _, w = attention_forward(g, blk, q, kv, return_weights=True)
    assert w.data.shape == (4, 6, 10)
    assert np.all(w.data >= 0)
    np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-6)


def test_attention_permutation_equivariant_over_keys():
    blk, _ = make_attn(seed=11, d=8, n_h=2)
    rng = np.random.default_rng(12)
    q = rng.normal(size=(3, 8))
    kv = rng.normal(size=(7, 8))
    perm = np.random.default_rng(13).permutation(7)
    g = Graph(dtype=np.float64)
    out1, w1 = attention_forward(g, blk, g.constant(q), g.constant(kv), return_weights=True)
    out2, w2 = attention_forward(g, blk, g.constant(q), g.constant(kv[perm]), return_weights=True)
    np.testing.assert_allclose(out1.data, out2.data, atol=1e-6)
    np.testing.assert_allclose(w1.data, w2.data[:, :, np.argsort(perm)], atol=1e-6)


def test_attention_self_mode_requires_shared_tokens():
    blk, _ = make_attn(mode="self")
    g = Graph(dtype=np.float64)
    x = g.constant(np.ones((2, 8)))
    y = g.constant(np.ones((2, 8)))
    with pytest.raises(ShapeError):
        blk(g, x, y)
    out, _ = blk(g, x, x)
    assert out.data.shape == (2, 8)


def test_attention_key_mask_removes_token_influence():
    blk, _ = make_attn(seed=21)
    rng = np.random.default_rng(22)
    q = rng.normal(size=(1, 3, 8))
    kv = rng.normal(size=(1, 4, 8))
    kv_altered = kv.copy()
    kv_altered[0, 3] = 100.0  # masked token mutated
    mask = np.array([[True, True, True, False]])
    g = Graph(dtype=np.float64)
    out1, w1 = blk(g, g.constant(q), g.constant(kv), key_mask=mask, return_weights=True)
    out2, _ = blk(g, g.constant(q), g.constant(kv_altered), key_mask=mask)
    np.testing.assert_allclose(out1.data, out2.data, atol=1e-9)
    assert np.all(w1.data[..., 3] < 1e-12)


def test_attention_batched_matches_per_sample():
    blk, _ = make_attn(seed=31, d=8, n_h=2)
    rng = np.random.default_rng(32)
    q = rng.normal(size=(3, 2, 8))
    kv = rng.normal(size=(3, 5, 8))
    g = Graph(dtype=np.float64)
    out_b, w_b = blk(g, g.constant(q), g.constant(kv), return_weights=True)
    for i in range(3):
        out_i, w_i = blk(g, g.constant(q[i]), g.constant(kv[i]), return_weights=True)
        np.testing.assert_allclose(out_b.data[i], out_i.data, atol=1e-10)
        np.testing.assert_allclose(w_b.data[i], w_i.data, atol=1e-10)


def test_attention_rejects_width_mismatch():
    blk, _ = make_attn()
    g = Graph(dtype=np.float64)
    with pytest.raises(ShapeError):
        blk(g, g.constant(np.ones((2, 6))), g.constant(np.ones((2, 8))))


# ---- timestep embedding -------------------------------------------------------------


def test_timestep_zero_gives_zero_sin_unit_cos():
    e = timestep_embed(0.0, 8)
    np.testing.assert_array_equal(e[:4], 0.0)
    np.testing.assert_array_equal(e[4:], 1.0)


def test_timestep_pure_and_clamped():
    np.testing.assert_array_equal(timestep_embed(0.3, 16), timestep_embed(0.3, 16))
    np.testing.assert_array_equal(timestep_embed(-5.0, 8), timestep_embed(0.0, 8))
    np.testing.assert_array_equal(timestep_embed(7.0, 8), timestep_embed(1.0, 8))


def test_timestep_d4_closed_form():
    # frequencies geomspace(1, 1e4, 2) = [1, 1e4]; t = 0.5
    e = timestep_embed(0.5, 4)
    expect = np.array([math.sin(0.5), math.sin(5000.0), math.cos(0.5), math.cos(5000.0)])
    np.testing.assert_allclose(e, expect, rtol=1e-12)


def test_timestep_rejects_odd_width():
    with pytest.raises(ValueError):
        timestep_embed(0.5, 7)


# ---- init ---------------------------------------------------------------------------


def test_init_deterministic_per_seed():
    def build(store, rng):
        MLP(store, "m", [16, 32, 16], rng)
        AttentionBlock(store, "a", 16, 4, rng)

    s1, s2 = init_params(build, 5), init_params(build, 5)
    for (k1, t1), (k2, t2) in zip(s1.items(), s2.items()):
        assert k1 == k2
        np.testing.assert_array_equal(t1.data, t2.data)
    s3 = init_params(build, 6)
    assert not np.array_equal(s1.get("m.0.weight").data, s3.get("m.0.weight").data)


def test_init_biases_zero_weight_variance_faninscaled():
    def build(store, rng):
        MLP(store, "m", [128, 128], rng)

    s = init_params(build, 3)
    w = s.get("m.0.weight").data
    assert w.size >= 10_000
    np.testing.assert_array_equal(s.get("m.0.bias").data, 0.0)
    var = float(w.var())
    assert abs(var - 1.0 / 128) <= 0.2 * (1.0 / 128)
    direct = fanin_uniform(Rng(1), 100, 100)
    assert abs(direct.var() - 0.01) <= 0.002


def test_zero_init_linear_outputs_zero():
    s = ParamStore()
    lin = Linear(s, "out", 8, 4, zero_init=True)
    g = Graph()
    out = lin(g, g.constant(np.random.default_rng(0).normal(size=(3, 8)).astype(np.float32)))
    np.testing.assert_array_equal(out.data, 0.0)


# ---- gradients through blocks ---------------------------------------------------------


def test_gradcheck_through_mlp_params():
    rng = Rng(41)
    x = rng.standard_normal((4, 6))
    target = rng.standard_normal((4, 3))

    def build(g, ts):
        w1, b1, w2, b2 = ts
        h = g.add(g.matmul(g.constant(x), w1), g.matmul(g.ones((4, 1)), g.reshape(b1, (1, 5))))
        h = g.gelu(h)
        y = g.add(g.matmul(h, w2), g.matmul(g.ones((4, 1)), g.reshape(b2, (1, 3))))
        return g.mse(y, g.constant(target))

    res = finite_diff_check(build, [rng.standard_normal((6, 5)) * 0.5, rng.standard_normal((5,)) * 0.1,
                                    rng.standard_normal((5, 3)) * 0.5, rng.standard_normal((3,)) * 0.1])
    assert res.ok, res.max_rel_err


def test_gradcheck_through_attention_params():
    d, n_h = 4, 2
    rng = Rng(42)
    q = rng.standard_normal((3, d))
    kv = rng.standard_normal((5, d))
    tgt = rng.standard_normal((3, d))

    def build(g, ts):
        store = ParamStore(dtype=np.float64)
        blk = AttentionBlock(store, "a", d, n_h, Rng(0), mode="cross")
        for t_new, (_, t_old) in zip(ts, store.items()):
            t_old.data = t_new.data
            t_old.grad = None
            # reuse leaf tensors so gradients reach ts
        blk.wq.weight, blk.wq.bias = ts[0], ts[1]
        blk.wk.weight, blk.wk.bias = ts[2], ts[3]
        blk.wv.weight, blk.wv.bias = ts[4], ts[5]
        blk.wo.weight, blk.wo.bias = ts[6], ts[7]
        out, _ = blk(g, g.constant(q), g.constant(kv))
        return g.mse(out, g.constant(tgt))

    arrays = []
    r2 = Rng(43)
    for _ in range(4):
        arrays.append(r2.standard_normal((d, d)) * 0.6)
        arrays.append(r2.standard_normal((d,)) * 0.1)
    res = finite_diff_check(build, arrays)
    assert res.ok, f"rel={res.max_rel_err} worst={res.worst}"


def test_gradcheck_through_modulation():
    rng = Rng(44)
    x = rng.standard_normal((2, 3, 4))

    def build(g, ts):
        shift, scale = ts
        return g.mean(g.mul(modulate(g, g.constant(x), shift, scale),
                            g.constant(np.ones((2, 3, 4)))))

    res = finite_diff_check(build, [rng.standard_normal((2, 4)), rng.standard_normal((2, 4))])
    assert res.ok, res.max_rel_err
