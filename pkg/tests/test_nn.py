import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_net
from oracles import central_differences, worst_relative_error
from wbmia.errors import ArgumentError, DimensionError, NumericError
from wbmia.nn import (LayerSpec, Network, OptimizerState, backward, conv1d_rows, dense, dropout,
                      forward, gradient_norm, loss_and_backward, mlp, optimizer_step, relu)


def test_identity_dense_layer():
    net = Network([dense(2, 2)], [np.eye(2), np.zeros(2)])
    tr = forward(net, np.array([3.0, -1.0]))
    np.testing.assert_array_equal(tr.logits, [[3.0, -1.0]])


def test_relu_clamps_negative():
    net = Network([dense(1, 1), relu()], [np.array([[2.0]]), np.array([1.0])])
    tr = forward(net, np.array([-5.0]))
    assert tr.activations[0][0, 0] == -9.0
    assert tr.activations[1][0, 0] == 0.0


def test_softmax_sums_to_one():
    net = random_net([7, 5, 4, 3], seed=1)
    x = np.random.default_rng(0).normal(size=(10, 7))
    tr = forward(net, x)
    np.testing.assert_allclose(tr.probs.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(tr.probs >= 0) and np.all(tr.probs <= 1)


def test_shape_mismatch():
    net = random_net([3, 2], seed=0)
    with pytest.raises(DimensionError):
        forward(net, np.zeros(4))


def test_non_finite_is_numeric_error():
    net = Network([dense(1, 1)], [np.array([[np.inf]]), np.zeros(1)])
    with pytest.raises(NumericError):
        forward(net, np.array([1.0]))


def test_layer_composition_checked():
    with pytest.raises(DimensionError):
        Network.init([dense(3, 4), relu(), dense(5, 2)])
    with pytest.raises(ArgumentError):
        LayerSpec("dropout", keep_prob=0.0)
    with pytest.raises(ArgumentError):
        LayerSpec("dense", in_dim=0, out_dim=3)


def test_init_distribution():
    net = Network.init(mlp([50, 400, 10]), seed=3)
    W = net.params[0]
    assert abs(W.mean()) < 1e-3
    assert abs(W.std() - 0.01) < 5e-4
    assert not net.params[1].any() and not net.params[3].any()


def test_uniform_logits_loss_is_log_k():
    net = Network([dense(3, 4)], [np.zeros((3, 4)), np.zeros(4)])
    tr, _ = loss_and_backward(net, np.array([1.0, 2.0, 3.0]), 2)
    assert tr.loss == pytest.approx(math.log(4), abs=1e-12)


def test_zero_net_bias_gradient_is_probs_minus_onehot():
    net = Network.init(mlp([4, 3, 5]), seed=0).zero_()
    tr, bt = loss_and_backward(net, np.array([1.0, -2.0, 0.5, 3.0]), 1)
    expected = tr.probs[0] - np.eye(5)[1]
    np.testing.assert_allclose(bt[-1], expected, atol=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(seed):
    gen = np.random.default_rng(100 + seed)
    net = random_net([5, 6, 4], seed=seed)
    x = gen.normal(size=(3, 5))
    y = gen.integers(0, 4, size=3)
    _, bt = loss_and_backward(net, x, y)
    num = central_differences(lambda: forward(net, x, y=y).loss, net.params)
    assert worst_relative_error(bt.param_grads, num) <= 1e-4


def test_l2_term_gradient_matches_finite_differences():
    gen = np.random.default_rng(5)
    net = random_net([4, 3, 3], seed=5)
    x, y = gen.normal(size=(2, 4)), np.array([0, 2])
    _, bt = loss_and_backward(net, x, y, l2=0.3)
    num = central_differences(lambda: loss_and_backward(net, x, y, l2=0.3)[0].loss, net.params)
    assert worst_relative_error(bt.param_grads, num) <= 1e-4


def test_conv_rows_gradients_match_finite_differences():
    gen = np.random.default_rng(9)
    layers = [conv1d_rows(3, 5, kernels=2, kernel_width=2, stride=2), relu(), dense(3 * 2 * 2, 2)]
    net = Network.init(layers, seed=1)
    for p in net.params:
        p[...] = gen.normal(size=p.shape)
    x = gen.normal(size=(2, 15))
    g_out = gen.normal(size=(2, 2))
    f = lambda: float(np.sum(forward(net, x, with_probs=False).logits * g_out))  # noqa: E731
    bt = backward(net, forward(net, x, with_probs=False), g_out)
    assert worst_relative_error(bt.param_grads, central_differences(f, net.params)) <= 1e-4
    xin = [x]
    num_x = central_differences(f, xin)[0]
    np.testing.assert_allclose(bt.input_grad, num_x, rtol=1e-5, atol=1e-8)


def test_conv_rows_full_width_is_row_matmul():
    gen = np.random.default_rng(2)
    K = gen.normal(size=(4, 3))
    net = Network([conv1d_rows(2, 3, kernels=4)], [K, np.zeros(4)])
    x = gen.normal(size=(1, 2, 3))
    out = forward(net, x, with_probs=False).activations[0]
    np.testing.assert_allclose(out[0, :, 0, :], x[0] @ K.T)


def test_dropout_only_in_train_mode_and_deterministic():
    net = Network.init([dense(4, 50), relu(), dropout(0.5), dense(50, 2)], seed=0)
    x = np.ones((3, 4))
    a = forward(net, x, train_mode=True, dropout_seed=7)
    b = forward(net, x, train_mode=True, dropout_seed=7)
    c = forward(net, x, train_mode=True, dropout_seed=8)
    ev = forward(net, x)
    np.testing.assert_array_equal(a.logits, b.logits)
    assert not np.array_equal(a.masks[2], c.masks[2])
    assert ev.masks[2] is None
    kept = a.masks[2][a.masks[2] > 0]
    np.testing.assert_allclose(kept, 2.0)  # inverted dropout scale 1/keep_prob


def test_forward_bit_identical_across_runs():
    n1 = Network.init(mlp([6, 8, 3]), seed=42)
    n2 = Network.init(mlp([6, 8, 3]), seed=42)
    x = np.linspace(-1, 1, 12).reshape(2, 6)
    assert forward(n1, x).logits.tobytes() == forward(n2, x).logits.tobytes()


def test_sgd_one_step():
    net = Network([dense(1, 1)], [np.array([[1.0]]), np.array([0.0])])
    optimizer_step(OptimizerState("sgd", 0.1), net, [np.array([[2.0]]), np.array([0.0])])
    assert net.params[0][0, 0] == pytest.approx(0.8)


def test_sgd_zero_gradient_is_fixed_point():
    net = random_net([3, 2], seed=4)
    before = [p.copy() for p in net.params]
    st_ = OptimizerState("sgd", 0.5)
    optimizer_step(st_, net, [np.zeros_like(p) for p in net.params])
    for a, b in zip(before, net.params):
        np.testing.assert_array_equal(a, b)
    assert st_.step_count == 1


def test_sgd_l2_shrinks_weights():
    net = random_net([3, 2], seed=4)
    norm0 = np.sqrt(sum(np.sum(p**2) for p in net.params))
    optimizer_step(OptimizerState("sgd", 0.1, l2_weight=0.5), net, [np.zeros_like(p) for p in net.params])
    assert np.sqrt(sum(np.sum(p**2) for p in net.params)) < norm0


@pytest.mark.parametrize("c", [1e-3, 0.5, 2.0, 1e4])
def test_adam_first_step(c):
    lr, eps = 1e-3, 1e-8
    net = Network([dense(1, 1)], [np.array([[0.0]]), np.array([0.0])])
    optimizer_step(OptimizerState("adam", lr, eps=eps), net, [np.array([[c]]), np.array([0.0])])
    # m_hat = c, v_hat = c^2 after bias correction
    hand = -lr * c / (math.sqrt(c * c) + eps)
    assert net.params[0][0, 0] == pytest.approx(hand, abs=1e-15)
    assert abs(net.params[0][0, 0] + lr) < 1e-6


def test_optimizer_rejects_misaligned():
    net = random_net([3, 2], seed=0)
    with pytest.raises(DimensionError):
        optimizer_step(OptimizerState("sgd", 0.1), net, [np.zeros((2, 3)), np.zeros(2)])


def test_gradient_norm_examples():
    assert gradient_norm([np.array([3.0]), np.array([4.0])], "all") == 5.0
    assert gradient_norm([np.zeros((2, 2)), np.zeros(2)]) == 0.0
    with pytest.raises(IndexError):
        gradient_norm([np.zeros(1), np.zeros(1)], 3)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(0, 10_000))
def test_gradient_norm_pythagoras(layers, seed):
    gen = np.random.default_rng(seed)
    grads = []
    for _ in range(layers):
        grads += [gen.normal(size=(3, 2)), gen.normal(size=2)]
    total = gradient_norm(grads, "all") ** 2
    parts = sum(gradient_norm(grads, i) ** 2 for i in range(layers))
    assert total == pytest.approx(parts, abs=1e-9)
    assert gradient_norm(grads, "last") == gradient_norm(grads, layers - 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_cross_entropy_non_negative(seed):
    gen = np.random.default_rng(seed)
    net = random_net([4, 3, 5], seed=seed, std=3.0)
    tr = forward(net, gen.normal(size=(4, 4)) * 10, y=gen.integers(0, 5, size=4))
    assert np.all(tr.losses >= 0)
    np.testing.assert_allclose(tr.probs.sum(axis=1), 1.0, atol=1e-9)
