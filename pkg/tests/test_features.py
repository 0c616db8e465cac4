import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_net
from wbmia.errors import ArgumentError
from wbmia.features import (AttackFeatures, FeatureSelection, derived_targets, dump_csv, extract,
                            normalized_entropy, resolve_layers)
from wbmia.nn import gradient_norm, loss_and_backward, mlp
from wbmia.snapshot import ModelSnapshot
from wbmia.target import TargetConfig, train_target


def snap_of(net, epoch=0):
    return ModelSnapshot.of(net, epoch)


@pytest.fixture
def net_and_data():
    net = random_net([6, 5, 4, 3], seed=3, std=0.7)
    gen = np.random.default_rng(0)
    return net, gen.normal(size=(7, 6)), gen.integers(0, 3, size=7)


def test_loss_only_single_scalar(net_and_data):
    net, X, y = net_and_data
    sel = FeatureSelection(grad_layers="none", include_label=False, include_output=False)
    f = extract([snap_of(net)], X[0], y[0], sel)
    assert f.loss.shape == (1, 1) and not f.grads and f.output is None and f.label is None
    tr, _ = loss_and_backward(net, X[0], y[0])
    assert f.loss[0, 0] == pytest.approx(tr.loss, rel=1e-12)


def test_identical_snapshots_identical_features(net_and_data):
    net, X, y = net_and_data
    s = snap_of(net)
    f = extract([s, s, s], X, y, FeatureSelection(grad_layers="all", output_layers="all"))
    assert f.T == 3
    for t in (1, 2):
        for i in f.grads:
            np.testing.assert_array_equal(f.grads[i][:, t], f.grads[i][:, 0])
        for i in f.outputs:
            np.testing.assert_array_equal(f.outputs[i][:, t], f.outputs[i][:, 0])
        np.testing.assert_array_equal(f.loss[:, t], f.loss[:, 0])


def test_zero_last_layer_gives_uniform_output():
    net = random_net([5, 4, 6], seed=1)
    net.params[-2][...] = 0.0
    net.params[-1][...] = 0.0
    f = extract([snap_of(net)], np.ones((2, 5)), [0, 3])
    np.testing.assert_allclose(f.output[:, 0], 1 / 6)
    np.testing.assert_allclose(f.loss, math.log(6))


def test_per_example_gradients_match_backprop(net_and_data):
    net, X, y = net_and_data
    f = extract([snap_of(net)], X, y, FeatureSelection(grad_layers="all"))
    for r in range(len(y)):
        _, bt = loss_and_backward(net, X[r], y[r])
        for i in range(3):
            np.testing.assert_allclose(f.grads[i][r, 0], bt[2 * i], rtol=1e-10, atol=1e-14)
            assert f.layer_grad_norms[r, 0, i] == pytest.approx(gradient_norm(bt, i), rel=1e-10)
        assert f.grad_norm[r, 0] == pytest.approx(gradient_norm(bt, "all"), rel=1e-10)


def test_hidden_outputs_are_post_relu(net_and_data):
    net, X, y = net_and_data
    f = extract([snap_of(net)], X, y, FeatureSelection(output_layers="all"))
    assert sorted(f.outputs) == [0, 1]
    h0 = np.maximum(X @ net.params[0] + net.params[1], 0)
    np.testing.assert_allclose(f.outputs[0][:, 0], h0)


def test_architecture_mismatch_rejected():
    a = snap_of(random_net([4, 3, 2], seed=0))
    b = snap_of(random_net([4, 5, 2], seed=0))
    with pytest.raises(ArgumentError):
        extract([a, b], np.zeros((1, 4)), [0])


def test_empty_selection_rejected():
    with pytest.raises(ArgumentError):
        FeatureSelection(grad_layers="none", include_loss=False, include_label=False, include_output=False)


def test_resolve_layers():
    assert resolve_layers("last", 4) == [3]
    assert resolve_layers(("last_k", 2), 4) == [2, 3]
    assert resolve_layers([0, -1], 4) == [0, 3]
    assert resolve_layers("none", 4) == []
    with pytest.raises(ArgumentError):
        resolve_layers([7], 4)


def test_derived_targets_uniform():
    K = 5
    t = derived_targets(np.full(K, 1 / K), 2, grad_norm=0.0)
    assert t[3] == pytest.approx(1.0)
    assert t[0] == pytest.approx(math.log(K))


def test_derived_targets_one_hot():
    t = derived_targets(np.eye(4)[1], 1, grad_norm=0.0)
    np.testing.assert_allclose(t, [0.0, 1.0, 1.0, 0.0, 0.0], atol=0)


def test_derived_targets_tie_goes_to_lowest_index():
    t = derived_targets(np.array([0.5, 0.5]), 0, grad_norm=1.5)
    assert t[3] == pytest.approx(1.0)
    assert t[2] == 0.5 and t[1] == 1.0 and t[4] == 1.5
    t1 = derived_targets(np.array([0.5, 0.5]), 1, grad_norm=0.0)
    assert t1[1] == 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 12), st.integers(0, 100_000))
def test_entropy_bounds(K, seed):
    gen = np.random.default_rng(seed)
    p = gen.dirichlet(np.full(K, 0.5))
    h = normalized_entropy(p)
    assert 0.0 <= h <= 1.0
    assert normalized_entropy(np.eye(K)[seed % K]) == 0.0
    assert normalized_entropy(np.full(K, 1 / K)) == pytest.approx(1.0)
    if p.max() < 1 - 1e-9:
        assert h > 0


def test_members_have_smaller_gradient_norms(small_data, small_split):
    res = train_target(small_data, small_split, TargetConfig([30, 64, 4], epochs=30, selection="last"), seed=0)
    fm = extract([res.final], *small_data.subset(small_split.attack_test_members))
    fn = extract([res.final], *small_data.subset(small_split.attack_test_nonmembers))
    assert fm.last_grad_norm.mean() < fn.last_grad_norm.mean()


def test_take_concat_save_load(tmp_path, net_and_data):
    net, X, y = net_and_data
    f = extract([snap_of(net), snap_of(net, 1)], X, y, FeatureSelection(grad_layers="all", output_layers="last"))
    g = AttackFeatures.concat([f.take([0, 1]), f.take(np.arange(2, 7))])
    np.testing.assert_array_equal(g.grads[1], f.grads[1])
    f.save(tmp_path / "f.npz")
    h = AttackFeatures.load(tmp_path / "f.npz")
    assert h.shapes() == f.shapes() and h.selection == f.selection
    np.testing.assert_array_equal(h.targets, f.targets)


def test_chunked_extraction_matches(net_and_data):
    net, X, y = net_and_data
    a = extract([snap_of(net)], X, y, chunk=3)
    b = extract([snap_of(net)], X, y)
    np.testing.assert_allclose(a.grads[2], b.grads[2], rtol=1e-12, atol=1e-15)


def test_dump_csv(tmp_path, net_and_data):
    net, X, y = net_and_data
    f = extract([snap_of(net), snap_of(net)], X[:3], y[:3], FeatureSelection(output_layers="last"))
    p = dump_csv(f, tmp_path / "f.csv", membership=[1, 0, 1])
    rows = list(csv.reader(p.open()))
    assert len(rows) == 1 + 3 * 2
    header = rows[0]
    assert header[:3] == ["example", "t", "member"]
    assert len(header) == 3 + 5 + 1 + 3 + 3 + 4 + 4 * 3
    assert all(len(r) == len(header) for r in rows)


def test_mlp_layer_counting():
    assert sum(s.kind == "dense" for s in mlp([3, 4, 5, 2])) == 3
