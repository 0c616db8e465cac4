"""
Dense neural-network engine with explicit forward and backward passes.

Everything is plain float64 numpy. A :class:`Network` is an ordered list of
:class:`LayerSpec` plus a flat list of parameter arrays (``W``, ``b`` for
each dense or conv layer, in layer order). Batches run along axis 0; a 1-D
input is treated as a batch of one.

The forward pass keeps every layer output so that attackers (and
``backward``) can look at hidden activations, and ``backward`` accepts an
arbitrary upstream gradient so networks can be chained into larger models.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from wbmia import rng as _rng
from wbmia.errors import ArgumentError, DimensionError, NumericError

LAYER_KINDS = ("dense", "relu", "dropout", "conv1d-rows")
INIT_STD = 0.01


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a :class:`Network`.

    ``dense`` uses ``in_dim``/``out_dim``. ``dropout`` uses ``keep_prob``.
    ``conv1d-rows`` views its input as ``rows`` rows of length ``in_dim``
    and slides ``kernels`` filters of width ``kernel_width`` along each row
    with ``stride``, without padding.
    """

    kind: str
    in_dim: int = 0
    out_dim: int = 0
    keep_prob: float = 1.0
    kernels: int = 0
    kernel_width: int = 0
    stride: int = 1
    rows: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ArgumentError(f"unknown layer kind {self.kind!r}")
        if self.kind == "dense" and (self.in_dim < 1 or self.out_dim < 1):
            raise ArgumentError("dense layer needs in_dim, out_dim >= 1")
        if self.kind == "dropout" and not 0.0 < self.keep_prob <= 1.0:
            raise ArgumentError("dropout keep_prob must be in (0, 1]")
        if self.kind == "conv1d-rows":
            if min(self.rows, self.in_dim, self.kernels, self.kernel_width, self.stride) < 1:
                raise ArgumentError("conv1d-rows needs positive rows, in_dim, kernels, kernel_width, stride")
            if self.kernel_width > self.in_dim:
                raise ArgumentError("conv1d-rows kernel wider than its input rows")

    @property
    def has_params(self) -> bool:
        return self.kind in ("dense", "conv1d-rows")

    @property
    def positions(self) -> int:
        """Number of kernel positions per row (conv1d-rows only)."""
        return (self.in_dim - self.kernel_width) // self.stride + 1

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "dense":
            d.update(in_dim=self.in_dim, out_dim=self.out_dim)
        elif self.kind == "dropout":
            d.update(keep_prob=self.keep_prob)
        elif self.kind == "conv1d-rows":
            d.update(rows=self.rows, in_dim=self.in_dim, kernels=self.kernels,
                     kernel_width=self.kernel_width, stride=self.stride)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


def dense(in_dim: int, out_dim: int) -> LayerSpec:
    return LayerSpec("dense", in_dim=in_dim, out_dim=out_dim)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def dropout(rate: float) -> LayerSpec:
    """Dropout that zeroes a fraction ``rate`` of units."""
    return LayerSpec("dropout", keep_prob=1.0 - rate)


def conv1d_rows(rows: int, width: int, kernels: int, kernel_width: int | None = None,
                stride: int = 1) -> LayerSpec:
    return LayerSpec("conv1d-rows", rows=rows, in_dim=width, kernels=kernels,
                     kernel_width=width if kernel_width is None else kernel_width, stride=stride)


def mlp(sizes, hidden_dropout: float = 0.0, final_activation: bool = False) -> list[LayerSpec]:
    """Dense stack ``sizes[0] -> ... -> sizes[-1]`` with ReLU between layers."""
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(dense(a, b))
        last = i == len(sizes) - 2
        if not last or final_activation:
            layers.append(relu())
            if hidden_dropout > 0:
                layers.append(dropout(hidden_dropout))
    return layers


def flat_widths(layers) -> list[int]:
    """Flattened output width of each layer; checks that adjacent layers compose."""
    widths = []
    width = None
    for i, spec in enumerate(layers):
        if spec.kind == "dense":
            if width is not None and width != spec.in_dim:
                raise DimensionError(f"layer {i}: dense expects width {spec.in_dim}, gets {width}")
            width = spec.out_dim
        elif spec.kind == "conv1d-rows":
            if width is not None and width != spec.rows * spec.in_dim:
                raise DimensionError(
                    f"layer {i}: conv1d-rows expects width {spec.rows * spec.in_dim}, gets {width}")
            width = spec.rows * spec.positions * spec.kernels
        elif width is None:
            raise DimensionError(f"layer {i}: {spec.kind} cannot be the first layer")
        widths.append(width)
    return widths


def param_shapes(layers) -> list[tuple]:
    shapes = []
    for spec in layers:
        if spec.kind == "dense":
            shapes += [(spec.in_dim, spec.out_dim), (spec.out_dim,)]
        elif spec.kind == "conv1d-rows":
            shapes += [(spec.kernels, spec.kernel_width), (spec.kernels,)]
    return shapes


@dataclass
class Network:
    layers: list
    params: list
    rng_seed: int = 0

    def __post_init__(self):
        flat_widths(self.layers)
        shapes = param_shapes(self.layers)
        if len(shapes) != len(self.params):
            raise DimensionError(f"expected {len(shapes)} parameter arrays, got {len(self.params)}")
        for i, (s, p) in enumerate(zip(shapes, self.params)):
            if tuple(p.shape) != s:
                raise DimensionError(f"param {i} has shape {p.shape}, expected {s}")

    @classmethod
    def init(cls, layers, seed: int = 0) -> "Network":
        """Weights ~ N(0, 0.01^2), biases 0."""
        gen = _rng.stream(seed, "init")
        params = []
        for shape in param_shapes(layers):
            if len(shape) == 1:
                params.append(np.zeros(shape))
            else:
                params.append(gen.normal(0.0, INIT_STD, size=shape))
        return cls(list(layers), params, seed)

    @property
    def in_width(self) -> int:
        first = self.layers[0]
        return first.in_dim if first.kind == "dense" else first.rows * first.in_dim

    @property
    def out_width(self) -> int:
        return flat_widths(self.layers)[-1]

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params)

    def param_layers(self) -> list[int]:
        """Indices (into ``layers``) of layers that own parameters."""
        return [i for i, s in enumerate(self.layers) if s.has_params]

    def copy(self) -> "Network":
        return Network(list(self.layers), [p.copy() for p in self.params], self.rng_seed)

    def zero_(self) -> "Network":
        for p in self.params:
            p[...] = 0.0
        return self


@dataclass(frozen=True)
class ForwardTrace:
    """Everything computed in one forward pass.

    ``activations[i]`` is the output of ``layers[i]``. ``probs``, ``loss``
    and ``losses`` are only filled when the caller asked for them.
    """

    inputs: np.ndarray
    activations: list
    masks: list
    logits: np.ndarray
    probs: np.ndarray | None = None
    loss: float | None = None
    losses: np.ndarray | None = None


@dataclass(frozen=True)
class BackwardTrace:
    param_grads: list
    input_grad: np.ndarray | None = None
    output_grads: list | None = None

    def __iter__(self):
        return iter(self.param_grads)

    def __len__(self):
        return len(self.param_grads)

    def __getitem__(self, i):
        return self.param_grads[i]


def _check_finite(a, where):
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values in {where}")


def _as_batch(net, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != net.in_width:
        raise DimensionError(f"input width {flat.shape[1]} != network input width {net.in_width}")
    return x


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _conv_windows(spec, x):
    x = x.reshape(x.shape[0], spec.rows, spec.in_dim)
    win = sliding_window_view(x, spec.kernel_width, axis=2)
    return win[:, :, :: spec.stride, :]


def _run(net, x, train_mode, dropout_seed):
    acts, masks = [], []
    gen = None
    h = x
    pi = 0
    for i, spec in enumerate(net.layers):
        mask = None
        if spec.kind == "dense":
            W, b = net.params[pi], net.params[pi + 1]
            pi += 2
            h = h.reshape(h.shape[0], -1) @ W + b
        elif spec.kind == "conv1d-rows":
            K, b = net.params[pi], net.params[pi + 1]
            pi += 2
            h = _conv_windows(spec, h) @ K.T + b
        elif spec.kind == "relu":
            h = np.maximum(h, 0.0)
        elif spec.kind == "dropout":
            if train_mode and spec.keep_prob < 1.0:
                if gen is None:
                    gen = _rng.stream(dropout_seed, "dropout")
                mask = (gen.random(h.shape) < spec.keep_prob) / spec.keep_prob
                h = h * mask
        _check_finite(h, f"layer {i} ({spec.kind})")
        acts.append(h)
        masks.append(mask)
    return acts, masks


def forward(net: Network, x, train_mode: bool = False, dropout_seed: int = 0,
            y=None, with_probs: bool = True) -> ForwardTrace:
    """Run ``net`` on ``x``.

    Dropout is active only when ``train_mode`` is set and draws its masks from
    a stream keyed by ``dropout_seed``. When ``y`` (class indices) is given the
    trace also carries the per-example and mean cross-entropy.
    """
    x = _as_batch(net, x)
    acts, masks = _run(net, x, train_mode, dropout_seed)
    logits = acts[-1].reshape(x.shape[0], -1)
    probs = loss = losses = None
    if with_probs or y is not None:
        probs = softmax(logits)
    if y is not None:
        y = _labels(y, logits.shape[0], logits.shape[1])
        losses = -log_softmax(logits)[np.arange(len(y)), y]
        loss = float(losses.mean())
    return ForwardTrace(x, acts, masks, logits, probs, loss, losses)


def _labels(y, n, k):
    y = np.atleast_1d(np.asarray(y))
    if y.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == np.round(y)):
            raise ArgumentError("labels must be integers")
        y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= k:
        raise ArgumentError(f"label out of range [0, {k})")
    return y


def backward(net: Network, trace: ForwardTrace, grad_out, record: bool = False) -> BackwardTrace:
    """Backpropagate ``grad_out`` (gradient w.r.t. the last layer output).

    Returns gradients aligned with ``net.params`` and the gradient w.r.t. the
    network input. With ``record`` the per-example gradient w.r.t. every
    layer's output is kept in ``output_grads``.
    """
    g = np.asarray(grad_out, dtype=np.float64).reshape(trace.activations[-1].shape)
    grads = [None] * len(net.params)
    out_grads = [None] * len(net.layers) if record else None
    pi = len(net.params)
    for i in range(len(net.layers) - 1, -1, -1):
        spec = net.layers[i]
        if record:
            out_grads[i] = g
        inp = trace.inputs if i == 0 else trace.activations[i - 1]
        if spec.kind == "dense":
            pi -= 2
            W = net.params[pi]
            a = inp.reshape(inp.shape[0], -1)
            grads[pi] = a.T @ g
            grads[pi + 1] = g.sum(axis=0)
            g = (g @ W.T).reshape(inp.shape)
        elif spec.kind == "conv1d-rows":
            pi -= 2
            K = net.params[pi]
            win = _conv_windows(spec, inp)
            grads[pi] = np.einsum("nrpk,nrpw->kw", g, win)
            grads[pi + 1] = g.sum(axis=(0, 1, 2))
            dwin = g @ K
            dx = np.zeros((inp.shape[0], spec.rows, spec.in_dim))
            for p in range(spec.positions):
                s = p * spec.stride
                dx[:, :, s:s + spec.kernel_width] += dwin[:, :, p, :]
            g = dx.reshape(inp.shape)
        elif spec.kind == "relu":
            g = g * (trace.activations[i] > 0)
        elif spec.kind == "dropout":
            if trace.masks[i] is not None:
                g = g * trace.masks[i]
    return BackwardTrace(grads, g, out_grads)


def loss_and_backward(net: Network, x, y, l2: float = 0.0) -> tuple[ForwardTrace, BackwardTrace]:
    """Mean softmax cross-entropy over the batch and its exact gradient.

    With ``l2 > 0`` the loss gains ``l2/2 * sum ||theta||^2`` over all
    parameters and the gradients gain ``l2 * theta``.
    """
    trace = forward(net, x, y=y)
    n = trace.logits.shape[0]
    yy = _labels(y, n, trace.logits.shape[1])
    g = trace.probs.copy()
    g[np.arange(n), yy] -= 1.0
    g /= n
    bt = backward(net, trace, g)
    if l2 > 0:
        penalty = 0.5 * l2 * sum(float(np.sum(p * p)) for p in net.params)
        trace = ForwardTrace(trace.inputs, trace.activations, trace.masks, trace.logits,
                             trace.probs, trace.loss + penalty, trace.losses)
        bt = BackwardTrace([gr + l2 * p for gr, p in zip(bt.param_grads, net.params)], bt.input_grad)
    return trace, bt


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    l2_weight: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step_count: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ArgumentError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate < 0 or self.l2_weight < 0:
            raise ArgumentError("learning_rate and l2_weight must be >= 0")

    def fresh(self) -> "OptimizerState":
        """Same hyperparameters, no accumulated moments."""
        return OptimizerState(self.kind, self.learning_rate, self.l2_weight,
                              self.beta1, self.beta2, self.eps)

    def hyper(self) -> dict:
        return {"kind": self.kind, "learning_rate": self.learning_rate, "l2_weight": self.l2_weight,
                "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


def optimizer_step(state: OptimizerState, net, grads):
    """Update ``net.params`` in place and return ``net``.

    SGD: ``W <- W - lr * (g + l2 * W)``. Adam uses the same L2-augmented
    gradient with bias-corrected moments.
    """
    params = net.params
    grads = list(grads)
    if len(grads) != len(params):
        raise DimensionError(f"{len(grads)} gradients for {len(params)} parameters")
    for g, p in zip(grads, params):
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
    lr, lam = state.learning_rate, state.l2_weight
    state.step_count += 1
    if state.kind == "sgd":
        for g, p in zip(grads, params):
            p -= lr * (g + lam * p) if lam else lr * g
        return net
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for g, p, m, v in zip(grads, params, state.m, state.v):
        if lam:
            g = g + lam * p
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return net


def gradient_norm(grads, layer_selector="all", layers=None) -> float:
    """Euclidean norm over the selected gradient tensors.

    Gradients are grouped in (weight, bias) pairs, one pair per parametrized
    layer. ``layer_selector`` is ``"all"``, ``"last"`` or a pair index.
    """
    grads = list(grads)
    if layer_selector == "all":
        chosen = grads
    else:
        n_layers = (len(grads) + 1) // 2
        if layer_selector == "last":
            idx = n_layers - 1
        elif isinstance(layer_selector, (int, np.integer)) and not isinstance(layer_selector, bool):
            idx = int(layer_selector)
            if idx < 0:
                idx += n_layers
            if not 0 <= idx < n_layers:
                raise IndexError(f"layer index {layer_selector} out of range for {n_layers} layers")
        else:
            raise ArgumentError(f"invalid layer selector {layer_selector!r}")
        chosen = grads[2 * idx:2 * idx + 2]
    return float(np.sqrt(sum(float(np.sum(np.square(g))) for g in chosen)))


def numerical_gradient(f, params, h: float = 1e-5) -> list:
    """Central finite differences of scalar ``f()`` w.r.t. each array in ``params``.

    Perturbs the arrays in place and restores them.
    """
    out = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + h
            fp = f()
            p[idx] = old - h
            fm = f()
            p[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def max_relative_error(analytic, numeric, abs_floor: float = 1e-8) -> float:
    """Largest relative discrepancy; entries with ``|analytic| < abs_floor`` compare absolutely."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.ravel(a)
        n = np.ravel(n)
        diff = np.abs(a - n)
        small = np.abs(a) < abs_floor
        rel = np.where(small, diff, diff / np.maximum(np.abs(a), abs_floor))
        if rel.size:
            worst = max(worst, float(rel.max()))
    return worst
