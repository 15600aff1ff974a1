import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import POOLINGS, tiny_config, zero_params
from hornn.model import (
    HornnConfig,
    StateBuffer,
    StepTrace,
    feedback,
    forward_window,
    init_params,
    param_shapes,
    pool,
    step,
)
from hornn.numerics import ContractError
from reference_rnn import rnn_forward


def random_history(cfg, lanes=2, seed=0):
    rng = np.random.default_rng(seed)
    return StateBuffer([rng.uniform(0, 1, (lanes, cfg.hidden)) for _ in range(cfg.order)])


# --- config and parameters ---------------------------------------------------


def test_config_rejects_bad_alpha_for_fofe():
    with pytest.raises(ContractError):
        HornnConfig(vocab=5, pooling="fofe", alpha=1.5)
    with pytest.raises(ContractError):
        HornnConfig(vocab=5, pooling="fofe", alpha=0.0)
    HornnConfig(vocab=5, pooling="plain", alpha=1.5)


@pytest.mark.parametrize("bad", [dict(order=0), dict(hidden=0), dict(vocab=1), dict(pooling="avg"),
                                 dict(activation="elu"), dict(init_std=0), dict(precision=16)])
def test_config_validation(bad):
    with pytest.raises(ContractError):
        tiny_config(**bad)


def test_init_params_std_matches_recipe():
    cfg = HornnConfig(vocab=200, hidden=60, order=2, pooling="gated", init_std=0.1, precision=64)
    p = init_params(cfg)
    for name, w in p.named():
        assert w.size >= 3600
        assert 0.09 <= w.std() <= 0.11, name
        assert abs(w.mean()) <= 0.01, name


def test_init_params_deterministic_and_independent_streams():
    cfg = tiny_config(pooling="gated")
    a, b = init_params(cfg), init_params(cfg)
    for (_, x), (_, y) in zip(a.named(), b.named()):
        assert x.tobytes() == y.tobytes()
    assert not np.array_equal(a.w_h[0], a.w_h[1])
    c = init_params(replace(cfg, seed=cfg.seed + 1))
    assert not np.array_equal(a.w_in, c.w_in)


def test_gated_structure():
    p = init_params(tiny_config(pooling="gated", order=3))
    assert len(p.gate_w1) == 3 and len(p.gate_w2) == 3
    assert p.gate_w1[0].shape == (7, 11) and p.gate_w2[0].shape == (7, 7)
    assert len(list(p.named())) == 11
    assert init_params(tiny_config(pooling="fofe")).gate_w1 == []


def test_param_shapes_with_bias():
    shapes = param_shapes(tiny_config(bias=True))
    assert shapes["b_h"] == (7,) and shapes["b_out"] == (11,)


def test_precision_controls_dtype():
    assert init_params(tiny_config(precision=32)).w_in.dtype == np.float32
    assert init_params(tiny_config(precision=64)).w_in.dtype == np.float64


# --- pooling identities ------------------------------------------------------


@pytest.mark.parametrize("pooling", POOLINGS)
def test_zero_history_gives_zero_feedback(pooling):
    cfg = tiny_config(pooling=pooling)
    out = feedback(cfg, init_params(cfg), StateBuffer.zeros(cfg, 2), np.array([1, 4]))
    assert np.all(out == 0)


def test_max_pool_example():
    products = np.array([[1.0, -2.0], [0.5, 3.0]])
    pooled, selector = pool("max", products)
    np.testing.assert_array_equal(pooled, [1, 3])
    np.testing.assert_array_equal(selector, [0, 1])


def test_max_pool_ties_pick_smallest_path():
    _, selector = pool("max", np.array([[2.0, 1.0], [2.0, 1.0], [2.0, 0.0]]))
    np.testing.assert_array_equal(selector, [0, 0])


def test_fofe_coefficients():
    cfg = HornnConfig(vocab=5, order=3, pooling="fofe", alpha=0.6)
    np.testing.assert_allclose(cfg.fofe_coefficients(), [0.6, 0.36, 0.216], rtol=0, atol=1e-16)
    products = np.ones((3, 1))
    pooled, _ = pool("fofe", products, alpha=0.6)
    assert pooled[0] == 0.6 + 0.36 + 0.216


@settings(max_examples=60, deadline=None)
@given(st.floats(0.01, 0.99), st.integers(2, 8))
def test_fofe_coefficients_strictly_decrease(alpha, order):
    coef = HornnConfig(vocab=5, order=order, pooling="fofe", alpha=alpha).fofe_coefficients()
    assert np.all(np.diff(coef) < 0)


def test_gated_with_zero_gate_weights_halves_plain_sum():
    cfg = tiny_config(pooling="gated", order=3)
    p = init_params(cfg)
    for w in p.gate_w1 + p.gate_w2:
        w[...] = 0
    state = random_history(cfg)
    trace = StepTrace(x=None, history=[], products=None)
    out = feedback(cfg, p, state, np.array([2, 5]), trace)
    assert np.all(trace.gates == 0.5)
    plain_cfg = replace(cfg, pooling="plain")
    plain = feedback(plain_cfg, p, state, np.array([2, 5]))
    assert np.array_equal(out, 0.5 * plain)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 4))
def test_max_dominance(seed, order):
    rng = np.random.default_rng(seed)
    products = rng.normal(size=(order, 3, 5))
    k = rng.integers(order)
    products[k] = products.max(axis=0) + rng.uniform(0, 1, size=(3, 5))
    pooled, _ = pool("max", products)
    assert np.array_equal(pooled, products[k])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_gates_lie_strictly_inside_unit_interval(seed):
    cfg = tiny_config(pooling="gated", seed=seed % 1000, init_std=1.0)
    p = init_params(cfg)
    trace = StepTrace(x=None, history=[], products=None)
    feedback(cfg, p, random_history(cfg, seed=seed), np.array([0, 10]), trace)
    assert np.all(trace.gates > 0) and np.all(trace.gates < 1)


# --- step ---------------------------------------------------------------------


def test_zero_params_step_is_uniform():
    cfg = tiny_config(activation="sigmoid")
    h, y = step(cfg, zero_params(cfg), StateBuffer.zeros(cfg, 1), 3)
    assert np.all(h == 0.5)
    assert np.all(y == 1 / 11)


def test_scalar_hand_evaluation():
    cfg = HornnConfig(vocab=2, order=1, hidden=1, pooling="plain", precision=64)
    p = init_params(cfg)
    p.w_in[...] = [[1.0, 0.0]]
    p.w_h[0][...] = [[2.0]]
    p.w_out[...] = 0
    h, _ = step(cfg, p, StateBuffer([np.array([[0.3]])]), 0)
    assert h[0, 0] == pytest.approx(1 / (1 + math.exp(-1.6)), abs=1e-15)


def test_state_buffer_advances_newest_first():
    cfg = tiny_config(order=3)
    state = StateBuffer.zeros(cfg, 1)
    p = init_params(cfg)
    h1, _ = step(cfg, p, state, 1)
    h2, _ = step(cfg, p, state, 2)
    assert state.previous(1) is h2 and state.previous(2) is h1
    assert np.all(state.previous(3) == 0)
    assert state.time == 2


def test_step_rejects_out_of_range_token():
    cfg = tiny_config()
    with pytest.raises(ContractError):
        step(cfg, init_params(cfg), StateBuffer.zeros(cfg, 1), 11)


@pytest.mark.parametrize("activation", ["sigmoid", "tanh"])
def test_order_one_plain_reduces_to_vanilla_rnn_bitwise(activation):
    cfg = tiny_config(order=1, pooling="plain", activation=activation, init_std=0.7)
    p = init_params(cfg)
    rng = np.random.default_rng(1)
    h0 = rng.uniform(0, 1, (3, cfg.hidden))
    inputs = rng.integers(0, cfg.vocab, (3, 9))
    ref_h, _ = rnn_forward(p.w_in, p.w_h[0], p.w_out, h0, inputs, activation)
    traces, _ = forward_window(cfg, p, StateBuffer([h0.copy()]), inputs, inputs)
    for t, tr in enumerate(traces):
        assert np.array_equal(tr.h, ref_h[t])


def test_order_one_fofe_is_rnn_with_scaled_recurrence():
    cfg = tiny_config(order=1, pooling="fofe", alpha=0.6, init_std=0.7)
    p = init_params(cfg)
    rng = np.random.default_rng(2)
    h0 = rng.uniform(0, 1, (2, cfg.hidden))
    inputs = rng.integers(0, cfg.vocab, (2, 12))
    ref_h, _ = rnn_forward(p.w_in, 0.6 * p.w_h[0], p.w_out, h0, inputs)
    traces, _ = forward_window(cfg, p, StateBuffer([h0.copy()]), inputs, inputs)
    np.testing.assert_allclose(np.array([tr.h for tr in traces]), ref_h, rtol=0, atol=1e-12)


@pytest.mark.parametrize("pooling", POOLINGS)
def test_state_causality(pooling):
    cfg = tiny_config(pooling=pooling, init_std=0.5)
    p = init_params(cfg)
    x = np.array([[1, 4, 2, 7, 3, 9]])
    t = 3
    base, _ = forward_window(cfg, p, StateBuffer.zeros(cfg, 1), x, x)
    x2 = x.copy()
    x2[0, t + 1] = (x2[0, t + 1] + 5) % cfg.vocab
    pert, _ = forward_window(cfg, p, StateBuffer.zeros(cfg, 1), x2, x2)
    for s in range(t + 1):
        assert np.array_equal(base[s].h, pert[s].h)
    assert not np.array_equal(base[t + 1].h, pert[t + 1].h)


@pytest.mark.parametrize("pooling", POOLINGS)
def test_sigmoid_hidden_states_bounded(pooling):
    cfg = tiny_config(pooling=pooling, init_std=2.0)
    p = init_params(cfg)
    x = np.random.default_rng(0).integers(0, 11, (4, 20))
    traces, _ = forward_window(cfg, p, StateBuffer.zeros(cfg, 4), x, x)
    hs = np.array([tr.h for tr in traces])
    assert np.all(hs > 0) and np.all(hs < 1)


# --- forward_window ------------------------------------------------------------


def test_uniform_model_nll_is_log_vocab():
    cfg = tiny_config()
    x = np.random.default_rng(0).integers(0, 11, (3, 17))
    _, nll = forward_window(cfg, zero_params(cfg), StateBuffer.zeros(cfg, 3), x, x[:, ::-1].copy())
    assert nll == math.log(11)


@pytest.mark.parametrize("pooling", POOLINGS)
def test_single_step_window_equals_step(pooling):
    cfg = tiny_config(pooling=pooling, init_std=0.5)
    p = init_params(cfg)
    s1, s2 = random_history(cfg), random_history(cfg)
    x, y = np.array([[3], [8]]), np.array([[1], [0]])
    traces, nll = forward_window(cfg, p, s1, x, y)
    h, out = step(cfg, p, s2, x[:, 0])
    assert np.array_equal(traces[0].h, h)
    assert np.array_equal(traces[0].y, out)
    assert nll == pytest.approx(-np.mean(np.log(out[[0, 1], [1, 0]])), rel=1e-14)


def test_three_step_window_matches_hand_sum():
    cfg = HornnConfig(vocab=3, order=2, hidden=2, pooling="plain", precision=64)
    p = init_params(cfg)
    p.w_in[...] = [[0.5, -1.0, 0.2], [0.1, 0.3, -0.4]]
    p.w_h[0][...] = [[0.2, 0.0], [0.0, -0.3]]
    p.w_h[1][...] = [[0.1, 0.1], [-0.2, 0.05]]
    p.w_out[...] = [[1.0, 0.0], [0.0, 1.0], [-1.0, 1.0]]
    inputs, targets = [0, 2, 1], [2, 1, 0]

    sig = lambda z: 1 / (1 + np.exp(-z))
    h1 = h2 = np.zeros(2)
    total = 0.0
    for x, tgt in zip(inputs, targets):
        h = sig(p.w_in[:, x] + p.w_h[0] @ h1 + p.w_h[1] @ h2)
        logits = p.w_out @ h
        total += -(logits[tgt] - np.log(np.sum(np.exp(logits))))
        h1, h2 = h, h1
    _, nll = forward_window(cfg, p, StateBuffer.zeros(cfg, 1), np.array(inputs), np.array(targets))
    assert nll == pytest.approx(total / 3, rel=1e-13)


def test_window_carries_state():
    cfg = tiny_config(pooling="gated", init_std=0.5)
    p = init_params(cfg)
    x = np.random.default_rng(4).integers(0, 11, (2, 12))
    whole, _ = forward_window(cfg, p, StateBuffer.zeros(cfg, 2), x, x)
    state = StateBuffer.zeros(cfg, 2)
    first, _ = forward_window(cfg, p, state, x[:, :5], x[:, :5])
    second, _ = forward_window(cfg, p, state, x[:, 5:], x[:, 5:])
    for a, b in zip(whole, first + second):
        assert np.array_equal(a.h, b.h)


def test_window_rejects_bad_targets():
    cfg = tiny_config()
    p = init_params(cfg)
    with pytest.raises(ContractError):
        forward_window(cfg, p, StateBuffer.zeros(cfg, 1), np.array([1, 2]), np.array([1, 11]))
    with pytest.raises(ContractError):
        forward_window(cfg, p, StateBuffer.zeros(cfg, 1), np.array([1, 2]), np.array([1]))
