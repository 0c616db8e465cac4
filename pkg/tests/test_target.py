import numpy as np
import pytest

from wbmia.data import Dataset, make_split
from wbmia.errors import ArgumentError, DimensionError
from wbmia.nn import OptimizerState
from wbmia.snapshot import ModelSnapshot, load_snapshot, load_tensors, save_snapshot, save_tensors
from wbmia.target import (TargetConfig, finetune_split, finetune_target, mean_loss, train_target)


def separable_toy(n=200, seed=0):
    gen = np.random.default_rng(seed)
    X = gen.normal(size=(n, 2))
    y = (X[:, 0] + 0.5 * X[:, 1] > 0).astype(np.int64)
    X[:, 0] += np.where(y == 1, 0.5, -0.5)  # margin
    return Dataset(X, y, 2, "toy")


def test_separable_toy_fits_exactly():
    ds = separable_toy()
    split = make_split(len(ds), 150, 50, 0, 0, 0, seed=0)
    cfg = TargetConfig([2, 2], optimizer=OptimizerState("adam", 0.05), epochs=50, batch_size=16)
    res = train_target(ds, split, cfg, seed=0)
    assert max(res.train_acc) == 1.0


def test_zero_epochs_is_chance(small_data, small_split):
    cfg = TargetConfig([30, 16, 4], epochs=0)
    res = train_target(small_data, small_split, cfg, seed=1)
    assert list(res.snapshots) == [0] and res.best_epoch == 0
    assert abs(res.train_acc[0] - 0.25) < 0.15


def test_training_deterministic(small_data, small_split):
    cfg = TargetConfig([30, 16, 4], epochs=5, snapshot_epochs=[2, 5])
    a = train_target(small_data, small_split, cfg, seed=3)
    b = train_target(small_data, small_split, cfg, seed=3)
    assert a.train_acc == b.train_acc and a.test_acc == b.test_acc
    assert sorted(a.snapshots) == [0, 2, 5]
    for p, q in zip(a.final.params, b.final.params):
        assert p.tobytes() == q.tobytes()


def test_final_is_best_test_epoch(small_data, small_split):
    cfg = TargetConfig([30, 16, 4], epochs=15)
    res = train_target(small_data, small_split, cfg, seed=2)
    assert res.test_acc[res.best_epoch] == max(res.test_acc[1:])
    assert res.final.epoch == res.best_epoch


def test_snapshots_immutable(small_data, small_split):
    cfg = TargetConfig([30, 16, 4], epochs=4, snapshot_epochs=[1])
    res = train_target(small_data, small_split, cfg, seed=0)
    snap = res.snapshots[1]
    with pytest.raises(ValueError):
        snap.params[0][0, 0] = 1.0
    net = snap.network()
    net.params[0][...] = 0.0
    assert np.any(snap.params[0] != 0)


def test_config_validation():
    with pytest.raises(ArgumentError):
        TargetConfig([5, 3], epochs=3, snapshot_epochs=[4])
    with pytest.raises(ArgumentError):
        TargetConfig([5])


def test_empty_train_split_rejected(small_data):
    split = make_split(len(small_data), 1, 10, 0, 0, 0, seed=0)
    split = type(split)(**{**split.__dict__, "target_train": np.zeros(0, dtype=np.int64)})
    with pytest.raises(ArgumentError):
        train_target(small_data, split, TargetConfig([30, 4], epochs=1), seed=0)


def test_finetune_zero_lr_is_identity(small_data, small_split):
    res = train_target(small_data, small_split, TargetConfig([30, 8, 4], epochs=2), seed=0)
    D_delta = small_split.target_test[:32]
    cfg = TargetConfig([30, 8, 4], optimizer=OptimizerState("sgd", 0.0), epochs=1, batch_size=64)
    tuned = finetune_target(res.final, small_data, D_delta, cfg, seed=0, D=small_split.target_train)
    for a, b in zip(res.final.params, tuned.params):
        np.testing.assert_array_equal(a, b)


def test_finetune_reduces_loss(small_data, small_split):
    res = train_target(small_data, small_split, TargetConfig([30, 8, 4], epochs=5), seed=0)
    D_delta = small_split.target_test[:100]
    X, y = small_data.subset(D_delta)
    tuned = finetune_target(res.final, small_data, D_delta, TargetConfig([30, 8, 4], epochs=5), seed=1,
                            D=small_split.target_train)
    assert mean_loss(tuned.network(), X, y) < mean_loss(res.final.network(), X, y)


def test_finetune_overlap_rejected(small_data, small_split):
    res = train_target(small_data, small_split, TargetConfig([30, 4], epochs=1), seed=0)
    with pytest.raises(ArgumentError):
        finetune_target(res.final, small_data, small_split.target_train[:5], TargetConfig([30, 4], epochs=1),
                        seed=0, D=small_split.target_train)


def test_finetune_split_sixty_forty():
    D, D_delta = finetune_split(np.arange(1000), 0.6, seed=0)
    assert len(D) == 600 and len(D_delta) == 400
    assert not set(D.tolist()) & set(D_delta.tolist())


def test_snapshot_file_round_trip(tmp_path, small_data, small_split):
    res = train_target(small_data, small_split, TargetConfig([30, 6, 4], epochs=1), seed=0)
    p = save_snapshot(res.final, tmp_path / "m.wbms")
    back = load_snapshot(p)
    assert back.epoch == res.final.epoch and back.arch == res.final.arch
    for a, b in zip(back.params, res.final.params):
        assert a.tobytes() == b.tobytes()


def test_snapshot_byte_layout(tmp_path):
    p = save_tensors(tmp_path / "t.wbms", [np.array([[1.0, 2.0]])], epoch=3, meta={})
    raw = p.read_bytes()
    assert raw[:4] == b"WBMS"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:16], "little") == 3
    assert raw[-16:] == np.array([1.0, 2.0], dtype="<f8").tobytes()
    tensors, epoch, _ = load_tensors(p)
    assert epoch == 3 and tensors[0].shape == (1, 2)


def test_snapshot_shape_checked():
    from wbmia.nn import mlp
    with pytest.raises(DimensionError):
        ModelSnapshot(0, (np.zeros((2, 2)), np.zeros(2)), tuple(mlp([3, 2])))
