"""
Training of target classifiers: stand-alone and fine-tuned.
"""

from dataclasses import dataclass, field

import numpy as np

from wbmia import rng as _rng
from wbmia.errors import ArgumentError
from wbmia.nn import Network, OptimizerState, forward, loss_and_backward, mlp, optimizer_step
from wbmia.snapshot import ModelSnapshot


@dataclass
class TargetConfig:
    layer_sizes: list
    optimizer: OptimizerState = field(default_factory=lambda: OptimizerState("adam", 1e-3))
    epochs: int = 100
    batch_size: int = 64
    snapshot_epochs: list = field(default_factory=list)
    selection: str = "best_test"

    def __post_init__(self):
        if len(self.layer_sizes) < 2:
            raise ArgumentError("layer_sizes needs at least input and output sizes")
        if self.epochs < 0 or self.batch_size < 1:
            raise ArgumentError("epochs >= 0 and batch_size >= 1 required")
        self.snapshot_epochs = sorted(set(int(e) for e in self.snapshot_epochs))
        if self.snapshot_epochs and (self.snapshot_epochs[0] < 1 or self.snapshot_epochs[-1] > self.epochs):
            raise ArgumentError("snapshot_epochs must lie in [1, epochs]")
        if self.selection not in ("best_test", "last"):
            raise ArgumentError(f"unknown selection rule {self.selection!r}")

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    def layers(self):
        return mlp(self.layer_sizes)

    def to_dict(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes), "optimizer": self.optimizer.hyper(),
                "epochs": self.epochs, "batch_size": self.batch_size,
                "snapshot_epochs": list(self.snapshot_epochs), "selection": self.selection}

    @classmethod
    def from_dict(cls, d: dict) -> "TargetConfig":
        d = dict(d)
        if "optimizer" in d:
            d["optimizer"] = OptimizerState(**d["optimizer"])
        return cls(**d)


@dataclass
class TrainResult:
    snapshots: dict
    train_acc: list
    test_acc: list
    best_epoch: int
    final: ModelSnapshot
    optimizer: OptimizerState

    @property
    def gap(self) -> float:
        """Train minus test accuracy of the final snapshot."""
        return self.train_acc[self.best_epoch] - self.test_acc[self.best_epoch]


def accuracy(net: Network, X, y, chunk: int = 4096) -> float:
    if len(y) == 0:
        return float("nan")
    correct = 0
    for s in range(0, len(y), chunk):
        probs = forward(net, X[s:s + chunk], with_probs=False).logits
        correct += int(np.sum(np.argmax(probs, axis=1) == y[s:s + chunk]))
    return correct / len(y)


def mean_loss(net: Network, X, y) -> float:
    return forward(net, X, y=y, with_probs=False).loss


def train_epoch(net: Network, opt: OptimizerState, X, y, batch_size: int,
                gen: np.random.Generator) -> Network:
    """One pass of shuffled mini-batch training, in place."""
    order = gen.permutation(len(y))
    for s in range(0, len(order), batch_size):
        idx = order[s:s + batch_size]
        _, grads = loss_and_backward(net, X[idx], y[idx])
        optimizer_step(opt, net, grads)
    return net


def train_target(ds, split, cfg: TargetConfig, seed: int) -> TrainResult:
    """Mini-batch training on ``split.target_train``.

    Records train/test accuracy after every epoch (index 0 is the
    initialisation), captures snapshots at ``cfg.snapshot_epochs`` and picks
    the final model by best test accuracy (ties: earliest epoch) or last epoch.
    """
    if len(split.target_train) == 0:
        raise ArgumentError("target_train is empty")
    if cfg.layer_sizes[0] != ds.dim or cfg.num_classes != ds.num_classes:
        raise ArgumentError(
            f"layer sizes {cfg.layer_sizes} do not fit data (d={ds.dim}, K={ds.num_classes})")
    Xtr, ytr = ds.subset(split.target_train)
    Xte, yte = ds.subset(split.target_test)
    net = Network.init(cfg.layers(), seed=_rng.draw_seed(_rng.stream(seed, "target-init")))
    opt = cfg.optimizer.fresh()
    snaps = {0: ModelSnapshot.of(net, 0)}
    train_acc = [accuracy(net, Xtr, ytr)]
    test_acc = [accuracy(net, Xte, yte)]
    best_epoch, best_snap = 0, snaps[0]
    for epoch in range(1, cfg.epochs + 1):
        train_epoch(net, opt, Xtr, ytr, cfg.batch_size, _rng.stream(seed, "target-epoch", epoch))
        train_acc.append(accuracy(net, Xtr, ytr))
        test_acc.append(accuracy(net, Xte, yte))
        if epoch in cfg.snapshot_epochs:
            snaps[epoch] = ModelSnapshot.of(net, epoch)
        better = test_acc[-1] > test_acc[best_epoch] if cfg.selection == "best_test" else True
        if better or best_epoch == 0:
            best_epoch = epoch
            best_snap = snaps.get(epoch) or ModelSnapshot.of(net, epoch)
    return TrainResult(snaps, train_acc, test_acc, best_epoch, best_snap, opt)


def finetune_target(base: ModelSnapshot, ds, D_delta, cfg: TargetConfig, seed: int,
                    D=None) -> ModelSnapshot:
    """Continue training ``base`` on ``D_delta`` only, with fresh optimizer moments.

    ``D`` is the base model's training set; overlap with it is rejected.
    """
    D_delta = np.asarray(D_delta, dtype=np.int64)
    if D is not None and np.intersect1d(D_delta, D).size:
        raise ArgumentError("fine-tuning set overlaps the base training set")
    if len(D_delta) == 0:
        raise ArgumentError("fine-tuning set is empty")
    X, y = ds.subset(D_delta)
    net = base.network()
    opt = cfg.optimizer.fresh()
    for epoch in range(1, cfg.epochs + 1):
        train_epoch(net, opt, X, y, cfg.batch_size, _rng.stream(seed, "finetune-epoch", epoch))
    return ModelSnapshot.of(net, base.epoch + cfg.epochs, finetuned=True)


def finetune_split(train_idx, fraction: float = 0.6, seed: int = 0):
    """Split a training index set into ``(D, D_delta)`` with ``|D| = round(fraction * n)``."""
    train_idx = np.asarray(train_idx, dtype=np.int64)
    perm = _rng.stream(seed, "finetune-split").permutation(train_idx)
    k = int(round(fraction * len(train_idx)))
    return np.sort(perm[:k]), np.sort(perm[k:])
