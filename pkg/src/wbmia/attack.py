"""
The membership inference model.

Every enabled feature flows through its own component network: the output
vector, the one-hot label, the loss and each hidden-layer output through a
small FCN, and each gradient matrix ``dL/dW_i`` (fan_in x fan_out) through a
row convolution whose kernel spans a whole row, followed by an FCN.
Observations over T snapshots are concatenated into each component's input.
The components' outputs are concatenated and fed to an FCN encoder ending in
a single unit.

Supervised attacks squash that unit with a logistic map and fit it to
membership labels under squared error. Unsupervised attacks add a decoder
that reconstructs five membership signals from the scalar and then discard
it; the scalar scores are split into two groups by 1-D 2-means.
"""

from dataclasses import dataclass, field

import numpy as np

from wbmia import rng as _rng
from wbmia.errors import ArgumentError, DegenerateError, DimensionError, FormatError
from wbmia.features import AttackFeatures
from wbmia.nn import (Network, OptimizerState, backward, conv1d_rows, dense, dropout,
                      forward, optimizer_step, relu)
from wbmia.snapshot import load_tensors, save_tensors

COMPONENT_SIZES = (128, 64)
ENCODER_SIZES = (256, 128, 64, 1)
DECODER_HIDDEN = 64
NUM_TARGETS = 5


@dataclass(frozen=True)
class AttackArch:
    """Layer layout of an attack model.

    ``inputs`` maps component name to the per-record shape of its feature
    (``grad{i}``: (T, fan_in, fan_out); others: flat (T*width,) or (K,)).
    """

    inputs: tuple
    kernels: int = 1000
    component_sizes: tuple = COMPONENT_SIZES
    encoder_sizes: tuple = ENCODER_SIZES
    decoder_hidden: int = DECODER_HIDDEN
    num_targets: int = NUM_TARGETS
    dropout: float = 0.2

    def __post_init__(self):
        if not self.inputs:
            raise ArgumentError("attack model needs at least one input component")
        if self.encoder_sizes[-1] != 1:
            raise ArgumentError("encoder must end in a single unit")

    @classmethod
    def for_features(cls, feat: AttackFeatures, **kw) -> "AttackArch":
        return cls(tuple(sorted(feat.shapes().items())), **kw)

    @property
    def names(self) -> list[str]:
        return [k for k, _ in self.inputs]

    def component_layers(self, name: str, shape) -> list:
        c1, c2 = self.component_sizes
        p = self.dropout
        if name.startswith("grad"):
            T, fan_in, fan_out = shape
            rows = T * fan_in
            return [conv1d_rows(rows, fan_out, self.kernels), relu(), dropout(p),
                    dense(rows * self.kernels, c1), relu(), dropout(p), dense(c1, c2), relu()]
        width = int(np.prod(shape))
        return [dense(width, c1), relu(), dropout(p), dense(c1, c2), relu()]

    def encoder_layers(self) -> list:
        sizes = [self.component_sizes[-1] * len(self.inputs), *self.encoder_sizes]
        layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            layers.append(dense(a, b))
            if i < len(sizes) - 2:
                layers += [relu(), dropout(self.dropout)]
        return layers

    def decoder_layers(self) -> list:
        return [dense(1, self.decoder_hidden), relu(), dropout(self.dropout),
                dense(self.decoder_hidden, self.num_targets)]

    def to_dict(self) -> dict:
        return {"inputs": [[k, list(v)] for k, v in self.inputs], "kernels": self.kernels,
                "component_sizes": list(self.component_sizes), "encoder_sizes": list(self.encoder_sizes),
                "decoder_hidden": self.decoder_hidden, "num_targets": self.num_targets,
                "dropout": self.dropout}

    @classmethod
    def from_dict(cls, d: dict) -> "AttackArch":
        d = dict(d)
        d["inputs"] = tuple((k, tuple(v)) for k, v in d["inputs"])
        for k in ("component_sizes", "encoder_sizes"):
            d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class AttackNet:
    arch: AttackArch
    components: dict
    encoder: Network
    decoder: Network | None = None
    mode: str = "supervised"
    target_mean: np.ndarray | None = None
    target_std: np.ndarray | None = None
    input_stats: dict = field(default_factory=dict)

    @classmethod
    def init(cls, arch: AttackArch, mode: str = "supervised", seed: int = 0) -> "AttackNet":
        if mode not in ("supervised", "unsupervised"):
            raise ArgumentError(f"unknown attack mode {mode!r}")
        comps = {name: Network.init(arch.component_layers(name, shape), seed=_rng.draw_seed(
            _rng.stream(seed, "attack-component", name))) for name, shape in arch.inputs}
        enc = Network.init(arch.encoder_layers(), seed=_rng.draw_seed(_rng.stream(seed, "encoder")))
        dec = None
        if mode == "unsupervised":
            dec = Network.init(arch.decoder_layers(), seed=_rng.draw_seed(_rng.stream(seed, "decoder")))
        return cls(arch, comps, enc, dec, mode)

    @property
    def networks(self) -> list[Network]:
        nets = [self.components[k] for k in self.arch.names] + [self.encoder]
        if self.decoder is not None:
            nets.append(self.decoder)
        return nets

    @property
    def params(self) -> list:
        return [p for net in self.networks for p in net.params]

    def set_params(self, values):
        for p, v in zip(self.params, values, strict=True):
            p[...] = v

    def fit_inputs(self, feat: AttackFeatures) -> "AttackNet":
        """Standardise every component input with per-entry mean/std of ``feat``."""
        for name in self.arch.names:
            a = component_input(feat, name)
            std = a.std(axis=0)
            self.input_stats[name] = (a.mean(axis=0), np.where(std > 1e-12, std, 1.0))
        return self

    def prepare(self, feat: AttackFeatures, name: str) -> np.ndarray:
        a = component_input(feat, name)
        if name in self.input_stats:
            mean, std = self.input_stats[name]
            a = (a - mean) / std
        return a

    def zero_(self) -> "AttackNet":
        for net in self.networks:
            net.zero_()
        return self


def component_input(feat: AttackFeatures, name: str) -> np.ndarray:
    """Flattened (n, width) input of component ``name``."""
    if name.startswith("grad"):
        a = feat.grads[int(name[4:])]
    elif name.startswith("out") and name != "output":
        a = feat.outputs[int(name[3:])]
    else:
        a = getattr(feat, name)
    if a is None:
        raise DimensionError(f"features lack {name!r}")
    return a.reshape(len(a), -1)


def _check_shapes(net: AttackNet, feat: AttackFeatures):
    have = feat.shapes()
    for name, shape in net.arch.inputs:
        if tuple(have.get(name, ())) != tuple(shape):
            raise DimensionError(f"feature {name!r} has shape {have.get(name)}, attack expects {shape}")


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _forward(net: AttackNet, feat: AttackFeatures, train_mode: bool, seed: int):
    comp_traces = {}
    pieces = []
    for name in net.arch.names:
        tr = forward(net.components[name], net.prepare(feat, name), train_mode,
                     _rng.draw_seed(_rng.stream(seed, "c", name)) if train_mode else 0, with_probs=False)
        comp_traces[name] = tr
        pieces.append(tr.logits)
    enc_tr = forward(net.encoder, np.concatenate(pieces, axis=1), train_mode,
                     _rng.draw_seed(_rng.stream(seed, "e")) if train_mode else 0, with_probs=False)
    z = enc_tr.logits[:, 0]
    dec_tr = None
    if net.decoder is not None:
        dec_tr = forward(net.decoder, z[:, None], train_mode,
                         _rng.draw_seed(_rng.stream(seed, "d")) if train_mode else 0, with_probs=False)
    return comp_traces, enc_tr, dec_tr, z


def _backward(net: AttackNet, traces, dz, drecon=None) -> list:
    comp_traces, enc_tr, dec_tr, _ = traces
    dz = np.asarray(dz, dtype=np.float64).reshape(-1, 1)
    dec_grads = []
    if net.decoder is not None:
        if drecon is None:
            drecon = np.zeros_like(dec_tr.logits)
        bt = backward(net.decoder, dec_tr, drecon)
        dz = dz + bt.input_grad
        dec_grads = bt.param_grads
    ebt = backward(net.encoder, enc_tr, dz)
    width = net.arch.component_sizes[-1]
    grads = []
    for j, name in enumerate(net.arch.names):
        g = ebt.input_grad[:, j * width:(j + 1) * width]
        grads += backward(net.components[name], comp_traces[name], g).param_grads
    return grads + ebt.param_grads + dec_grads


def attack_forward(net: AttackNet, feat: AttackFeatures, chunk: int = 2048):
    """Score every record (dropout off).

    Returns ``(scores, recon)``. Supervised scores are membership
    probabilities in (0, 1); unsupervised scores are the raw embedding and
    ``recon`` holds the decoder's reconstruction (in original target units).
    """
    _check_shapes(net, feat)
    scores, recons = [], []
    for s in range(0, len(feat), chunk):
        _, _, dec_tr, z = _forward(net, feat.take(np.arange(s, min(s + chunk, len(feat)))), False, 0)
        if net.mode == "supervised":
            scores.append(sigmoid(z))
        else:
            scores.append(z)
            r = dec_tr.logits
            if net.target_mean is not None:
                r = r * net.target_std + net.target_mean
            recons.append(r)
    return np.concatenate(scores), (np.concatenate(recons) if recons else None)


def membership_scores(net: AttackNet, feat: AttackFeatures) -> np.ndarray:
    return attack_forward(net, feat)[0]


def supervised_loss(scores, membership) -> float:
    """Mean of ``(h - 1)^2`` over members and ``h^2`` over non-members."""
    scores = np.asarray(scores, dtype=np.float64)
    m = np.asarray(membership, dtype=np.float64)
    return float(np.mean((scores - m) ** 2))


def supervised_loss_and_grads(net: AttackNet, feat: AttackFeatures, membership,
                              train_mode: bool = False, seed: int = 0):
    """Batch-mean squared error of the logistic score and its gradient."""
    traces = _forward(net, feat, train_mode, seed)
    z = traces[3]
    h = sigmoid(z)
    m = np.asarray(membership, dtype=np.float64)
    loss = float(np.mean((h - m) ** 2))
    dz = 2.0 * (h - m) * h * (1.0 - h) / len(m)
    return loss, _backward(net, traces, dz)


def reconstruction_loss_and_grads(net: AttackNet, feat: AttackFeatures, targets,
                                  train_mode: bool = False, seed: int = 0):
    """Mean squared error between decoder output and (standardised) targets."""
    traces = _forward(net, feat, train_mode, seed)
    r = traces[2].logits
    diff = r - targets
    loss = float(np.mean(diff**2))
    drecon = 2.0 * diff / diff.size
    return loss, _backward(net, traces, np.zeros(len(r)), drecon)


@dataclass
class AttackTrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    epochs: int = 100
    balanced_batches: bool = True
    model_selection: str = "best_test"
    kernels: int = 1000
    standardize: bool = True
    adam_eps: float = 1e-12

    def __post_init__(self):
        if self.balanced_batches and self.batch_size % 2:
            raise ArgumentError("balanced batches need an even batch size")
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate <= 0:
            raise ArgumentError("invalid attack training hyperparameters")
        if self.model_selection not in ("best_test", "last"):
            raise ArgumentError(f"unknown model selection {self.model_selection!r}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class AttackHistory:
    train_acc: list = field(default_factory=list)
    test_acc: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    best_epoch: int = 0
    batch_member_counts: list = field(default_factory=list)


def _balanced_batches(n_m, n_nm, half, gen):
    """Index pairs (members, non-members) covering the larger class once per epoch."""
    steps = -(-max(n_m, n_nm) // half)

    def cyc(n):
        reps = -(-steps * half // n)
        return np.concatenate([gen.permutation(n) for _ in range(reps)])[:steps * half]

    im, inm = cyc(n_m), cyc(n_nm)
    for s in range(steps):
        yield im[s * half:(s + 1) * half], inm[s * half:(s + 1) * half]


def accuracy_at(scores, membership, threshold=0.5) -> float:
    pred = np.asarray(scores) >= threshold
    return float(np.mean(pred == np.asarray(membership, dtype=bool)))


def train_supervised(members: AttackFeatures, nonmembers: AttackFeatures,
                     cfg: AttackTrainConfig | None = None, seed: int = 0,
                     test_members: AttackFeatures | None = None,
                     test_nonmembers: AttackFeatures | None = None,
                     arch: AttackArch | None = None):
    """Fit the attack to known members / non-members.

    Returns ``(net, history)``; with test sets and ``best_test`` selection
    the returned parameters are those of the epoch with the highest test
    accuracy at threshold 0.5 (ties: earliest).
    """
    cfg = cfg or AttackTrainConfig()
    if len(members) == 0 or len(nonmembers) == 0:
        raise ArgumentError("supervised training needs members and non-members")
    arch = arch or AttackArch.for_features(members, kernels=cfg.kernels)
    net = AttackNet.init(arch, "supervised", seed)
    _check_shapes(net, members)
    _check_shapes(net, nonmembers)
    opt = OptimizerState("adam", cfg.learning_rate, eps=cfg.adam_eps)
    both = AttackFeatures.concat([members, nonmembers])
    if cfg.standardize:
        net.fit_inputs(both)
    labels = np.r_[np.ones(len(members)), np.zeros(len(nonmembers))]
    has_test = test_members is not None and test_nonmembers is not None
    if has_test:
        test = AttackFeatures.concat([test_members, test_nonmembers])
        test_labels = np.r_[np.ones(len(test_members)), np.zeros(len(test_nonmembers))]
    hist = AttackHistory()
    best_params = [p.copy() for p in net.params]
    best_acc = -1.0
    n_m = len(members)
    for epoch in range(1, cfg.epochs + 1):
        gen = _rng.stream(seed, "attack-epoch", epoch)
        if cfg.balanced_batches:
            half = cfg.batch_size // 2
            batches = [np.r_[bm, n_m + bn] for bm, bn in _balanced_batches(n_m, len(nonmembers), half, gen)]
        else:
            order = gen.permutation(len(labels))
            batches = [order[s:s + cfg.batch_size] for s in range(0, len(order), cfg.batch_size)]
        losses = []
        for b, idx in enumerate(batches):
            hist.batch_member_counts.append(int(labels[idx].sum()))
            loss, grads = supervised_loss_and_grads(net, both.take(idx), labels[idx], True,
                                                    _rng.draw_seed(_rng.stream(seed, "drop", epoch, b)))
            optimizer_step(opt, net, grads)
            losses.append(loss)
        hist.loss.append(float(np.mean(losses)))
        hist.train_acc.append(accuracy_at(membership_scores(net, both), labels))
        if has_test:
            acc = accuracy_at(membership_scores(net, test), test_labels)
            hist.test_acc.append(acc)
            if cfg.model_selection == "best_test" and acc > best_acc:
                best_acc = acc
                hist.best_epoch = epoch
                best_params = [p.copy() for p in net.params]
    if has_test and cfg.model_selection == "best_test" and cfg.epochs > 0:
        net.set_params(best_params)
    else:
        hist.best_epoch = cfg.epochs
    return net, hist


def train_unsupervised(pool: AttackFeatures, cfg: AttackTrainConfig | None = None,
                       seed: int = 0, arch: AttackArch | None = None):
    """Fit encoder + decoder to reconstruct the pool's membership signals.

    The reconstruction targets are the five derived signals averaged over
    the T observations, standardised over the pool. Returns ``(net,
    history)``; ``history.loss`` is the per-epoch mean reconstruction loss.
    The decoder stays attached (for inspection) but scoring ignores it.
    """
    cfg = cfg or AttackTrainConfig()
    if len(pool) == 0:
        raise ArgumentError("unsupervised training needs a non-empty pool")
    arch = arch or AttackArch.for_features(pool, kernels=cfg.kernels)
    net = AttackNet.init(arch, "unsupervised", seed)
    _check_shapes(net, pool)
    if cfg.standardize:
        net.fit_inputs(pool)
    raw = pool.targets.mean(axis=1)
    mean = raw.mean(axis=0)
    std = raw.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    net.target_mean, net.target_std = mean, std
    targets = (raw - mean) / std
    opt = OptimizerState("adam", cfg.learning_rate, eps=cfg.adam_eps)
    hist = AttackHistory()
    for epoch in range(1, cfg.epochs + 1):
        order = _rng.stream(seed, "unsup-epoch", epoch).permutation(len(pool))
        losses = []
        for b, s in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[s:s + cfg.batch_size]
            loss, grads = reconstruction_loss_and_grads(
                net, pool.take(idx), targets[idx], True,
                _rng.draw_seed(_rng.stream(seed, "udrop", epoch, b)))
            optimizer_step(opt, net, grads)
            losses.append(loss * len(idx))
        hist.loss.append(float(np.sum(losses) / len(pool)))
    hist.best_epoch = cfg.epochs
    return net, hist


def two_means_threshold(scores) -> tuple[float, float]:
    """Best 1-D two-cluster split by within-cluster sum of squares.

    Returns ``(threshold, sse)``; the threshold is the midpoint between the
    two sorted neighbours that separate the clusters (ties: lowest split).
    """
    x = np.sort(np.asarray(scores, dtype=np.float64))
    n = len(x)
    if n < 2:
        raise ArgumentError("need at least two scores")
    if x[0] == x[-1]:
        raise DegenerateError("all scores identical; only one cluster")
    c1 = np.cumsum(x)
    c2 = np.cumsum(x * x)
    k = np.arange(1, n)  # left cluster sizes
    left_sse = c2[k - 1] - c1[k - 1] ** 2 / k
    rs, rs2 = c1[-1] - c1[k - 1], c2[-1] - c2[k - 1]
    right_sse = rs2 - rs**2 / (n - k)
    sse = left_sse + right_sse
    sse[x[k - 1] == x[k]] = np.inf
    # prefix sums lose precision; re-score near-optimal splits directly
    best = sse.min()
    near = np.flatnonzero(sse <= best + 1e-9 * max(abs(best), c2[-1]) + 1e-300)
    exact = [_split_sse(x, j + 1) for j in near]
    j = int(near[int(np.argmin(exact))])
    return float(0.5 * (x[j] + x[j + 1])), float(min(exact))


def _split_sse(x, k):
    a, b = x[:k], x[k:]
    return float(np.sum((a - a.mean()) ** 2) + np.sum((b - b.mean()) ** 2))


def cluster_membership(scores, grad_norms) -> np.ndarray:
    """Split scores in two and call the cluster with larger mean gradient norm non-members.

    On a line, two-way spectral clustering of a well-separated embedding and
    2-means both reduce to one threshold; the 2-means threshold is found
    exactly. Returns a boolean array, True = predicted member.
    """
    scores = np.asarray(scores, dtype=np.float64)
    grad_norms = np.asarray(grad_norms, dtype=np.float64)
    if scores.shape != grad_norms.shape or scores.ndim != 1:
        raise ArgumentError("scores and grad_norms must be 1-D and of equal length")
    thr, _ = two_means_threshold(scores)
    high = scores > thr
    high_is_member = grad_norms[high].mean() < grad_norms[~high].mean()
    return high if high_is_member else ~high


def save_attack(net: AttackNet, path, epoch: int = 0):
    """Persist an attack model in the snapshot file format.

    Tensor order: every parameter (components in name order, encoder,
    decoder), then each standardisation (mean, std) pair, then the target
    mean/std of an unsupervised model. The metadata records the layout.
    """
    tensors = list(net.params)
    stats = [name for name in net.arch.names if name in net.input_stats]
    for name in stats:
        tensors += list(net.input_stats[name])
    has_targets = net.target_mean is not None
    if has_targets:
        tensors += [net.target_mean, net.target_std]
    meta = {"kind": "attack", "attack_arch": net.arch.to_dict(), "mode": net.mode,
            "input_stats": stats, "has_targets": has_targets}
    return save_tensors(path, tensors, epoch, meta)


def load_attack(path) -> AttackNet:
    tensors, _, meta = load_tensors(path)
    if meta.get("kind") != "attack":
        raise FormatError(f"{path}: not an attack model")
    net = AttackNet.init(AttackArch.from_dict(meta["attack_arch"]), meta["mode"])
    n = len(net.params)
    expect = n + 2 * len(meta["input_stats"]) + (2 if meta["has_targets"] else 0)
    if len(tensors) != expect:
        raise FormatError(f"{path}: expected {expect} tensors, found {len(tensors)}")
    for p, t in zip(net.params, tensors[:n], strict=True):
        if p.shape != t.shape:
            raise FormatError(f"{path}: tensor shape {t.shape} does not match {p.shape}")
        p[...] = t
    rest = tensors[n:]
    for i, name in enumerate(meta["input_stats"]):
        net.input_stats[name] = (rest[2 * i], rest[2 * i + 1])
    if meta["has_targets"]:
        net.target_mean, net.target_std = rest[-2], rest[-1]
    return net
