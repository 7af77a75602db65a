import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tripletlab.core import (AttentionConfig, DimensionError, Linear, MLP, MultiHeadAttention,
                             NonFiniteError, Parameter, finite_diff_grad, matmul, mhca, mlp, msa,
                             sgd_momentum_step, sigmoid, sigmoid_backward, softmax_rows)

from gradcheck import check_params, layer_case
from oracles import attention_oracle, matmul_loops, softmax_direct


def _attn(d, h, residual=True, seed=0):
    return MultiHeadAttention(AttentionConfig(d, h, residual), np.random.default_rng(seed))


def _weights(attn):
    p = attn.named_parameters()
    d = dict(p)
    return [d[k].value for k in ("q.weight", "q.bias", "k.weight", "k.bias",
                                 "v.weight", "v.bias", "o.weight", "o.bias")]


# -- matmul --------------------------------------------------------------------

def test_matmul_identity_and_scalar():
    b = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(matmul(np.eye(3), b), b)
    assert matmul(np.array([[2.0]]), np.array([[3.0]]))[0, 0] == 6.0


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    np.testing.assert_allclose(matmul(a, b), matmul_loops(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


# -- sigmoid and softmax -------------------------------------------------------

def test_sigmoid_values():
    assert sigmoid(np.array([0.0]))[0] == 0.5
    assert abs(sigmoid(np.array([40.0]))[0] - 1.0) < 1e-15
    assert sigmoid(np.array([-40.0]))[0] < 1e-15
    assert abs(sigmoid(np.array([1.0]))[0] - 0.7310585786300049) < 1e-15


def test_sigmoid_never_nan():
    x = np.array([-1e308, -800.0, 800.0, 1e308])
    y = sigmoid(x)
    assert np.all(np.isfinite(y)) and y[0] == 0.0 and y[-1] == 1.0


def test_sigmoid_backward_formula():
    x = np.linspace(-3, 3, 7)
    y = sigmoid(x)
    np.testing.assert_allclose(sigmoid_backward(np.ones_like(x), y), y * (1 - y))


def test_softmax_examples():
    np.testing.assert_allclose(softmax_rows(np.zeros((1, 3))), [[1 / 3] * 3], atol=1e-15)
    np.testing.assert_allclose(softmax_rows(np.array([[1.0, 2.0, 3.0]]))[0],
                               softmax_direct([1.0, 2.0, 3.0]), atol=1e-12)
    x = np.array([[0.3, 1.7]])
    np.testing.assert_allclose(softmax_rows(x), softmax_rows(x + 5.0), atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 10_000))
def test_softmax_rows_sum_to_one(a, b, seed):
    x = np.random.default_rng(seed).normal(scale=20, size=(a, b))
    p = softmax_rows(x)
    assert np.all((p >= 0) & (p <= 1))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


# -- attention -----------------------------------------------------------------

def test_attention_config_divisibility():
    with pytest.raises(DimensionError):
        AttentionConfig(6, 4)


def test_msa_shape_and_singleton():
    attn = _attn(4, 2)
    for s in (1, 3, 7):
        x = np.random.default_rng(s).normal(size=(s, 4))
        assert msa(x, attn).shape == (s, 4)
    _, cache = attn.forward(np.ones((1, 4)))
    p = cache[6]
    assert np.all(p == 1.0)


def test_msa_matches_primitive_oracle():
    rng = np.random.default_rng(3)
    attn = _attn(4, 2, residual=True, seed=4)
    x = rng.normal(size=(3, 4))
    ref = attention_oracle(x, x, x, *_weights(attn), heads=2, residual=True)
    np.testing.assert_allclose(msa(x, attn), ref, rtol=0, atol=1e-10)


def test_mhca_matches_oracle_and_singleton():
    rng = np.random.default_rng(5)
    attn = _attn(4, 2, residual=False, seed=6)
    q, k, v = rng.normal(size=(2, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    ref = attention_oracle(q, k, v, *_weights(attn), heads=2, residual=False)
    np.testing.assert_allclose(mhca(q, k, v, attn), ref, rtol=0, atol=1e-10)
    # one key: every query row gets the projected value
    out = mhca(q, k[:1], v[:1], attn)
    w = dict(attn.named_parameters())
    proj = (v[:1] @ w["v.weight"].value + w["v.bias"].value) @ w["o.weight"].value \
        + w["o.bias"].value
    np.testing.assert_allclose(out, np.repeat(proj, 2, axis=0), atol=1e-12)


def test_mhca_self_reduces_to_msa_without_residual():
    attn = _attn(4, 2, residual=False, seed=7)
    x = np.random.default_rng(8).normal(size=(5, 4))
    assert np.array_equal(mhca(x, x, x, attn), msa(x, attn))


def test_mhca_dimension_mismatch():
    attn = _attn(4, 2)
    with pytest.raises(DimensionError):
        mhca(np.ones((2, 4)), np.ones((3, 2)), np.ones((3, 2)), attn)


def test_masked_attention_matches_oracle():
    rng = np.random.default_rng(9)
    attn = _attn(4, 2, seed=10)
    q, kv = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
    mask = rng.random((3, 5)) < 0.6
    mask[:, 0] = True
    ref = attention_oracle(q, kv, kv, *_weights(attn), heads=2, residual=True, mask=mask)
    np.testing.assert_allclose(attn.forward(q, kv, kv, mask)[0], ref, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 7), st.integers(0, 10_000))
def test_msa_permutation_equivariant(s, seed):
    rng = np.random.default_rng(seed)
    attn = _attn(4, 2, seed=seed)
    x = rng.normal(size=(s, 4))
    perm = rng.permutation(s)
    np.testing.assert_allclose(msa(x[perm], attn), msa(x, attn)[perm], atol=1e-12)


def test_ops_are_pure():
    attn = _attn(8, 4, seed=11)
    x = np.random.default_rng(12).normal(size=(6, 8))
    assert np.array_equal(msa(x, attn), msa(x, attn))


# -- mlp -----------------------------------------------------------------------

def test_mlp_zero_weights_give_zero():
    layer = MLP(3, 5, 2, np.random.default_rng(0))
    for _, p in layer.named_parameters():
        p.value[...] = 0.0
    assert np.all(mlp(np.ones((4, 3)), layer) == 0.0)


def test_identity_linear():
    lin = Linear(3, 3, np.random.default_rng(0))
    lin.params["weight"].value[...] = np.eye(3)
    lin.params["bias"].value[...] = 0.0
    x = np.random.default_rng(1).normal(size=(4, 3))
    assert np.array_equal(lin.forward(x)[0], x)


@pytest.mark.parametrize("act", ["gelu", "relu"])
def test_mlp_matches_direct_evaluation(act):
    from scipy.special import erf
    layer = MLP(3, 4, 2, np.random.default_rng(2), activation=act)
    w = {k: p.value for k, p in layer.named_parameters()}
    x = np.random.default_rng(3).normal(size=(5, 3))
    h = x @ w["fc1.weight"] + w["fc1.bias"]
    a = 0.5 * h * (1 + erf(h / math.sqrt(2))) if act == "gelu" else np.maximum(h, 0)
    np.testing.assert_allclose(mlp(x, layer), a @ w["fc2.weight"] + w["fc2.bias"], atol=1e-12)


def test_mlp_unknown_activation():
    with pytest.raises(ValueError):
        MLP(2, 2, 2, np.random.default_rng(0), activation="tanh")


# -- finite differences and SGD ------------------------------------------------

def test_finite_diff_quadratic_and_constant():
    p = Parameter(np.array([3.0]))
    assert abs(finite_diff_grad(lambda: p.value[0] ** 2, p)[0] - 6.0) < 1e-8
    q = Parameter(np.ones((2, 2)))
    assert np.all(finite_diff_grad(lambda: 1.0, q) == 0.0)


def test_finite_diff_non_finite_loss():
    p = Parameter(np.array([0.0]))
    with pytest.raises(NonFiniteError):
        finite_diff_grad(lambda: math.inf, p)


def test_sgd_plain_step_and_decay():
    p = Parameter(np.array([1.0]))
    p.grad[...] = 2.0
    sgd_momentum_step(p, 0.1, 0.0)
    assert p.value[0] == pytest.approx(0.8)
    q = Parameter(np.array([0.0]))
    q.velocity[...] = 4.0
    sgd_momentum_step(q, 0.5, 0.9)
    assert q.velocity[0] == pytest.approx(3.6)
    assert q.value[0] == pytest.approx(-0.5 * 0.9 * 4.0)


def test_sgd_two_hand_computed_steps():
    p = Parameter(np.array([0.0]))
    for _ in range(2):
        p.grad[...] = 1.0
        sgd_momentum_step(p, 0.05, 0.95)
    assert p.velocity[0] == pytest.approx(1.95, abs=1e-15)
    assert p.value[0] == pytest.approx(-0.1475, abs=1e-15)


def test_sgd_rejects_non_finite_grad():
    p = Parameter(np.array([0.0]))
    p.grad[...] = np.nan
    with pytest.raises(NonFiniteError):
        sgd_momentum_step(p, 0.1, 0.9)


# -- gradient checks for each parameterised layer ------------------------------

@pytest.mark.parametrize("kind", ["linear", "mlp", "msa", "mhca"])
def test_layer_gradients_match_finite_differences(kind):
    for seed in range(20):
        loss, backward, params = layer_case(kind, seed)
        worst, where = check_params(loss, backward, params)
        assert worst < 1e-4, (kind, seed, where, worst)


def test_attention_input_gradients():
    rng = np.random.default_rng(0)
    attn = _attn(4, 2, residual=True, seed=1)
    q, k, v = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    w = rng.normal(size=(3, 4))
    y, cache = attn.forward(q, k, v)
    dq, dk, dv = attn.backward(w, cache)
    for arr, grad in ((q, dq), (k, dk), (v, dv)):
        p = Parameter(arr)
        arr_ref = p.value

        def loss(ref=arr_ref):
            args = [ref if a is arr else a for a in (q, k, v)]
            return float(np.sum(attn.forward(*args)[0] * w))
        num = finite_diff_grad(loss, p)
        np.testing.assert_allclose(grad, num, rtol=1e-6, atol=1e-9)


def test_gradcheck_catches_a_wrong_gradient():
    loss, backward, params = layer_case("msa", 3)
    params = list(params)

    def skewed():
        backward()
        params[0][1].grad *= 1.001
    assert check_params(loss, backward, params)[0] < 1e-4
    worst, where = check_params(loss, skewed, params)
    assert worst > 5e-4 and where == params[0][0]
