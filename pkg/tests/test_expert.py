"""Action expert: conditioning switch, velocity field, flow loss, sampler."""

import math

import numpy as np
import pytest

from touchgate.autodiff import Graph, ShapeError
from touchgate.expert import (ActionChunk, ActionExpert, ConditioningToken,
                              flow_match_loss, flow_match_loss_batch,
                              flow_match_targets, make_conditioning, sample_chunk,
                              velocity_forward)
from touchgate.gradcheck import finite_diff_check_params
from touchgate.nn import ParamStore
from touchgate.rng import Rng
from touchgate.slowstream import SlowLatents
from touchgate.tactile import GateDecision

DIMS = dict(d=8, n_h=2, H=2, D_a=2, n_blocks=1, n_c=1)


def tiny_expert(seed=1, randomize_zero_init=False, **over):
    cfg = {**DIMS, **over}
    store = ParamStore(dtype=np.float64)
    model = ActionExpert(store, rng=Rng(seed), **cfg)
    if randomize_zero_init:
        r = Rng(seed + 1000)
        for name, t in store.items():
            if "ada" in name or "act_out" in name:
                t.data = 0.3 * r.standard_normal(t.data.shape)
    return model, store


def slow_of(g, B=1, n_kv=5, d=8, seed=2):
    kv = Rng(seed).standard_normal((B, n_kv, d))
    return SlowLatents(kv=g.constant(kv), key_mask=np.ones((B, n_kv), dtype=bool),
                       issued_step=0, n_patches=3)


def cond_of(g, B=1, d=8, seed=3, source="state"):
    return ConditioningToken(token=g.constant(Rng(seed).standard_normal((B, 1, d))),
                             source=source)


# ---- conditioning switch ---------------------------------------------------------


def test_make_conditioning_selects_source():
    g = Graph(dtype=np.float64)
    z_s = g.constant(np.ones((1, 1, 8)))
    z_t = g.constant(np.full((1, 1, 8), 2.0))
    off = make_conditioning(GateDecision(0.2, False, 0.5), z_s, z_t)
    assert off.source == "state" and off.token is z_s
    on = make_conditioning(GateDecision(0.9, True, 0.5), z_s, z_t)
    assert on.source == "tactile" and on.token is z_t


def test_make_conditioning_ignores_garbage_unused_modality():
    g = Graph(dtype=np.float64)
    z_s = g.constant(np.ones((1, 1, 8)))
    garbage = g.constant(np.full((1, 1, 8), np.nan))
    out = make_conditioning(False, z_s, garbage)
    assert out.token is z_s
    # and the unused token may even be absent
    assert make_conditioning(False, z_s, None).token is z_s
    with pytest.raises(ValueError):
        make_conditioning(True, z_s, None)


def test_velocity_independent_of_unused_modality():
    model, _ = tiny_expert(randomize_zero_init=True)
    g = Graph(dtype=np.float64)
    slow = slow_of(g)
    z_s = g.constant(Rng(4).standard_normal((1, 1, 8)))
    noisy = Rng(5).standard_normal((2, 2))
    for z_t_val in (np.zeros((1, 1, 8)), np.full((1, 1, 8), 123.0)):
        cond = make_conditioning(False, z_s, g.constant(z_t_val))
        v = model.velocity_batch(g, noisy[None], np.array([0.3]), cond, slow)[0]
        if "first" not in dir():
            first = v.data.copy()
        np.testing.assert_array_equal(v.data, first)


# ---- velocity field ---------------------------------------------------------------


def test_zero_init_output_projection_gives_zero_velocity():
    model, _ = tiny_expert()
    g = Graph(dtype=np.float64)
    v = velocity_forward(g, model, Rng(6).standard_normal((2, 2)), 0.7,
                         ConditioningToken(g.constant(Rng(7).standard_normal((1, 8))), "state"),
                         slow_of(g))
    np.testing.assert_array_equal(v.data, 0.0)


def test_velocity_purity():
    model, _ = tiny_expert(randomize_zero_init=True)
    g = Graph(dtype=np.float64)
    slow = slow_of(g)
    cond = cond_of(g)
    noisy = Rng(8).standard_normal((2, 2))
    v1 = velocity_forward(g, model, noisy, 0.25, cond, slow)
    v2 = velocity_forward(g, model, noisy, 0.25, cond, slow)
    np.testing.assert_array_equal(v1.data, v2.data)


def test_velocity_rejects_bad_shapes():
    model, _ = tiny_expert()
    g = Graph(dtype=np.float64)
    with pytest.raises(ShapeError):
        velocity_forward(g, model, np.zeros((3, 2)), 0.1, cond_of(g), slow_of(g))
    with pytest.raises(ShapeError):
        model.velocity_batch(g, np.zeros((1, 2, 2)), np.array([0.1]),
                             cond_of(g, d=8), slow_of(g, d=6))


def test_sequence_shapes_identical_gate_on_vs_off():
    model, _ = tiny_expert(randomize_zero_init=True)

    def shapes_for(source):
        g = Graph(dtype=np.float64)
        slow = slow_of(g)
        cond = ConditioningToken(g.constant(Rng(9).standard_normal((1, 1, 8))), source)
        model.velocity_batch(g, np.zeros((1, 2, 2)), np.array([0.4]), cond, slow)
        return g.shapes()

    off, on = shapes_for("state"), shapes_for("tactile")
    assert off == on  # op-for-op identical, including every intermediate shape


def test_attention_recording_shapes_and_rowsums():
    model, _ = tiny_expert(randomize_zero_init=True, n_blocks=2)
    g = Graph(dtype=np.float64)
    slow = slow_of(g, n_kv=5)
    vel, attn = model.velocity_batch(g, np.zeros((1, 2, 2)), np.array([0.4]),
                                     cond_of(g), slow, record_attn=True)
    assert len(attn) == 2
    for w in attn:
        assert w.shape == (1, 2, 3, 5)  # [B, n_h, n_c + H, n_kv]
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)


def test_cond_only_cross_query_mode():
    model, _ = tiny_expert(randomize_zero_init=True, cross_query_mode="cond_only")
    g = Graph(dtype=np.float64)
    vel, attn = model.velocity_batch(g, np.zeros((1, 2, 2)), np.array([0.4]),
                                     cond_of(g), slow_of(g), record_attn=True)
    assert vel.data.shape == (1, 2, 2)
    assert attn[0].shape == (1, 2, 1, 5)  # queries = conditioning slot only


# ---- flow matching ------------------------------------------------------------------


def test_flow_match_targets_closed_form():
    A = np.ones((1, 2, 2))
    eps = np.zeros((1, 2, 2))
    x_t, v = flow_match_targets(A, eps, np.array([0.25]))
    np.testing.assert_array_equal(x_t, 0.25)
    np.testing.assert_array_equal(v, 1.0)


class _StubRng:
    """Duck-typed rng returning preset draws for eps and t."""

    def __init__(self, eps, t):
        self._eps, self._t = np.asarray(eps, dtype=np.float64), np.asarray(t, dtype=np.float64)

    def standard_normal(self, shape):
        assert tuple(shape) == self._eps.shape
        return self._eps.copy()

    def uniform(self, shape):
        return self._t.copy()


def test_flow_loss_zero_when_target_equals_noise():
    # A == eps makes v* = 0; the zero-init model also outputs 0 -> loss 0
    model, _ = tiny_expert()
    g = Graph(dtype=np.float64)
    A = Rng(10).standard_normal((1, 2, 2))
    loss = flow_match_loss_batch(g, model, A, cond_of(g), slow_of(g),
                                 _StubRng(A, np.array([0.5])))
    assert loss.item() == 0.0


def test_flow_loss_equals_mean_square_vstar_for_zero_model():
    model, _ = tiny_expert()
    g = Graph(dtype=np.float64)
    A = np.full((1, 2, 2), 0.5)
    eps = np.zeros((1, 2, 2))  # v* = A, mean square 0.25
    loss = flow_match_loss_batch(g, model, A, cond_of(g), slow_of(g),
                                 _StubRng(eps, np.array([0.3])))
    assert loss.item() == pytest.approx(0.25, rel=1e-12)


def test_flow_loss_single_chunk_wrapper():
    model, _ = tiny_expert(randomize_zero_init=True)
    g = Graph(dtype=np.float64)
    loss = flow_match_loss(g, model, ActionChunk(np.ones((2, 2))),
                           ConditioningToken(g.constant(Rng(11).standard_normal((1, 8))), "state"),
                           slow_of(g), Rng(12))
    assert np.isfinite(loss.item()) and loss.item() > 0


# ---- sampler --------------------------------------------------------------------------


def test_sample_chunk_constant_field_exact_any_K():
    model, _ = tiny_expert()
    c = np.array([[0.3, -1.2], [2.0, 0.5]])
    for K in (1, 10, 100):
        rng = Rng(13)
        x0 = Rng(13).standard_normal((2, 2))
        out = sample_chunk(model, None, "state", None, None, K, rng,
                           velocity_fn=lambda x, tau: c)
        # K accumulated float adds leave at most a few ulps of drift
        np.testing.assert_allclose(out.actions, x0 + c, rtol=1e-13, atol=1e-13)


def test_sample_chunk_k1_definition():
    model, _ = tiny_expert()
    rng = Rng(14)
    x0 = Rng(14).standard_normal((2, 2))
    out = sample_chunk(model, None, "state", None, None, 1, rng,
                       velocity_fn=lambda x, tau: -x)
    np.testing.assert_allclose(out.actions, x0 - x0 * 1.0, atol=1e-15)


class _OnesRng:
    def standard_normal(self, shape):
        return np.ones(shape)


def test_sample_chunk_linear_field_matches_exponential():
    model, _ = tiny_expert()
    out = sample_chunk(model, None, "state", None, None, 100, _OnesRng(),
                       velocity_fn=lambda x, tau: -x)
    assert np.allclose(out.actions, math.exp(-1.0), atol=0.01)


def test_sample_chunk_rejects_nonfinite_with_step_index():
    model, _ = tiny_expert()
    with pytest.raises(ValueError, match="step 3"):
        sample_chunk(model, None, "state", None, None, 10, Rng(15),
                     velocity_fn=lambda x, tau: np.full((2, 2), np.inf) if tau >= 0.3 else np.zeros((2, 2)))
    with pytest.raises(ValueError):
        sample_chunk(model, None, "state", None, None, 0, Rng(16))


def test_sample_chunk_through_model_deterministic():
    model, _ = tiny_expert(randomize_zero_init=True)
    kv = Rng(17).standard_normal((1, 5, 8))
    mask = np.ones((1, 5), dtype=bool)
    cond = Rng(18).standard_normal((1, 1, 8))
    a = sample_chunk(model, cond, "state", kv, mask, 5, Rng(19))
    b = sample_chunk(model, cond, "state", kv, mask, 5, Rng(19))
    np.testing.assert_array_equal(a.actions, b.actions)
    assert a.actions.shape == (2, 2)


# ---- gradients end to end ----------------------------------------------------------


def test_gradcheck_full_expert_flow_loss():
    model, store = tiny_expert(randomize_zero_init=True)
    targets = Rng(20).standard_normal((2, 2, 2))
    kv_data = Rng(21).standard_normal((2, 4, 8))
    cond_data = Rng(22).standard_normal((2, 1, 8))

    def make_loss():
        g = Graph(dtype=np.float64)
        slow = SlowLatents(kv=g.constant(kv_data), key_mask=np.ones((2, 4), dtype=bool),
                           issued_step=0, n_patches=2)
        cond = ConditioningToken(token=g.constant(cond_data), source="state")
        loss = flow_match_loss_batch(g, model, targets, cond, slow, Rng(23))
        return g, loss

    res = finite_diff_check_params(make_loss, store.tensors(),
                                   max_coords_per_param=6)
    assert res.ok, f"rel={res.max_rel_err} worst={res.worst} a={res.analytic} n={res.numeric}"


def test_velocity_golden_regression():
    # regression lock recorded after the gradient checks first passed
    model, _ = tiny_expert(seed=77, randomize_zero_init=True)
    g = Graph(dtype=np.float64)
    slow = SlowLatents(kv=g.constant(Rng(78).standard_normal((1, 4, 8))),
                       key_mask=np.ones((1, 4), dtype=bool), issued_step=0, n_patches=2)
    cond = ConditioningToken(token=g.constant(Rng(79).standard_normal((1, 1, 8))),
                             source="state")
    v = model.velocity_batch(g, Rng(80).standard_normal((1, 2, 2)),
                             np.array([0.35]), cond, slow)[0]
    golden = np.array(GOLDEN_VELOCITY)
    np.testing.assert_allclose(v.data[0], golden, rtol=1e-9, atol=1e-12)


GOLDEN_VELOCITY = [[-0.577793459383086, -0.5000160038693511],
                   [-0.49275225836167635, -0.3085303890420403]]
