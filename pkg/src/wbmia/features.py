"""
White-box attack features.

For each record and each observed snapshot the attacker runs the target
model forward (dropout off) and backward on the record's own label, and
keeps the selected per-layer gradients, hidden activations, output vector
and loss. Observations over ``T`` snapshots are stacked on axis 1.

Layer numbering: gradient layers count the target's dense layers
(0 = first, -1 = output layer); output layers count hidden layers only
(post-ReLU activations, 0 = first hidden, -1 = last hidden).
"""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from wbmia.errors import ArgumentError
from wbmia.nn import backward, forward, log_softmax

TARGET_NAMES = ("loss", "correct", "conf_true", "entropy", "grad_norm")


@dataclass(frozen=True)
class FeatureSelection:
    """Which white-box signals go into the attack.

    ``grad_layers`` / ``output_layers`` accept ``"all"``, ``"last"``,
    ``"none"``, ``("last_k", k)`` or an explicit list of layer indices.
    """

    grad_layers: object = "last"
    output_layers: object = "none"
    include_loss: bool = True
    include_label: bool = True
    include_output: bool = True

    def __post_init__(self):
        if not (self.include_loss or self.include_label or self.include_output
                or _nonempty(self.grad_layers) or _nonempty(self.output_layers)):
            raise ArgumentError("feature selection enables nothing")

    def to_dict(self) -> dict:
        return {"grad_layers": _sel_json(self.grad_layers), "output_layers": _sel_json(self.output_layers),
                "include_loss": self.include_loss, "include_label": self.include_label,
                "include_output": self.include_output}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSelection":
        d = dict(d)
        for k in ("grad_layers", "output_layers"):
            if isinstance(d.get(k), list) and d[k] and d[k][0] == "last_k":
                d[k] = ("last_k", int(d[k][1]))
            elif isinstance(d.get(k), list):
                d[k] = tuple(d[k])
        return cls(**d)

    @classmethod
    def output_only(cls) -> "FeatureSelection":
        """Black-box-equivalent ablation: the prediction vector alone."""
        return cls(grad_layers="none", output_layers="none", include_loss=False,
                   include_label=False, include_output=True)


def _nonempty(sel):
    return sel not in ("none", None, (), [])


def _sel_json(sel):
    return list(sel) if isinstance(sel, (tuple, list)) else sel


def resolve_layers(sel, count: int) -> list[int]:
    """Turn a layer selector into sorted non-negative indices below ``count``."""
    if sel in ("none", None):
        return []
    if sel == "all":
        return list(range(count))
    if sel == "last":
        return [count - 1] if count else []
    if isinstance(sel, tuple) and len(sel) == 2 and sel[0] == "last_k":
        k = int(sel[1])
        if k < 1 or k > count:
            raise ArgumentError(f"last_k={k} outside 1..{count}")
        return list(range(count - k, count))
    out = set()
    for i in sel:
        j = int(i) + count if int(i) < 0 else int(i)
        if not 0 <= j < count:
            raise ArgumentError(f"layer index {i} out of range for {count} layers")
        out.add(j)
    return sorted(out)


@dataclass(frozen=True)
class AttackFeatures:
    """Batched white-box observations for ``n`` records over ``T`` snapshots.

    grads[i]    (n, T, fan_in, fan_out)  dL/dW of dense layer i
    outputs[i]  (n, T, width)            activation of hidden layer i
    output      (n, T, K)                softmax output
    loss        (n, T)                   cross-entropy on the true label
    label       (n, K)                   one-hot true label, shared across T
    targets     (n, T, 5)                reconstruction targets (see TARGET_NAMES)
    layer_grad_norms (n, T, L)           per-layer gradient norm (W and b), all layers
    """

    grads: dict
    outputs: dict
    output: np.ndarray | None
    loss: np.ndarray | None
    label: np.ndarray | None
    targets: np.ndarray
    layer_grad_norms: np.ndarray
    selection: FeatureSelection = field(default_factory=FeatureSelection)

    def __len__(self):
        return self.targets.shape[0]

    @property
    def T(self) -> int:
        return self.targets.shape[1]

    @property
    def grad_norm(self) -> np.ndarray:
        """(n, T) norm of the full parameter gradient."""
        return self.targets[..., 4]

    @property
    def last_grad_norm(self) -> np.ndarray:
        """(n, T) norm of the output layer's gradient."""
        return self.layer_grad_norms[..., -1]

    def take(self, idx) -> "AttackFeatures":
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.int64)
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return AttackFeatures({k: v[idx] for k, v in self.grads.items()},
                              {k: v[idx] for k, v in self.outputs.items()},
                              pick(self.output), pick(self.loss), pick(self.label),
                              self.targets[idx], self.layer_grad_norms[idx], self.selection)

    @staticmethod
    def concat(parts) -> "AttackFeatures":
        parts = list(parts)
        first = parts[0]
        cat = lambda name: None if getattr(first, name) is None else np.concatenate(  # noqa: E731
            [getattr(p, name) for p in parts])
        return AttackFeatures({k: np.concatenate([p.grads[k] for p in parts]) for k in first.grads},
                              {k: np.concatenate([p.outputs[k] for p in parts]) for k in first.outputs},
                              cat("output"), cat("loss"), cat("label"), cat("targets"),
                              cat("layer_grad_norms"), first.selection)

    def shapes(self) -> dict:
        """Per-record shapes of every enabled feature (used to size attack nets)."""
        out = {f"grad{i}": g.shape[1:] for i, g in self.grads.items()}
        out.update({f"out{i}": h.shape[1:] for i, h in self.outputs.items()})
        for name in ("output", "loss", "label"):
            a = getattr(self, name)
            if a is not None:
                out[name] = a.shape[1:]
        return out

    def save(self, path) -> Path:
        path = Path(path)
        arrays = {f"grad{i}": g for i, g in self.grads.items()}
        arrays.update({f"out{i}": h for i, h in self.outputs.items()})
        for name in ("output", "loss", "label"):
            if getattr(self, name) is not None:
                arrays[name] = getattr(self, name)
        arrays["targets"] = self.targets
        arrays["layer_grad_norms"] = self.layer_grad_norms
        arrays["selection"] = np.frombuffer(json.dumps(self.selection.to_dict()).encode(), dtype=np.uint8)
        with path.open("wb") as fh:
            np.savez(fh, **arrays)
        return path

    @classmethod
    def load(cls, path) -> "AttackFeatures":
        with np.load(path) as z:
            sel = FeatureSelection.from_dict(json.loads(z["selection"].tobytes().decode()))
            grads = {int(k[4:]): z[k] for k in z.files if k.startswith("grad")}
            outs = {int(k[3:]): z[k] for k in z.files if k.startswith("out") and k != "output"}
            get = lambda k: z[k] if k in z.files else None  # noqa: E731
            return cls(grads, outs, get("output"), get("loss"), get("label"),
                       z["targets"], z["layer_grad_norms"], sel)


def normalized_entropy(probs) -> np.ndarray:
    """Shannon entropy of each distribution divided by log K, with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    K = p.shape[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    h = -plogp.sum(axis=-1) / np.log(K)
    return np.clip(h, 0.0, 1.0)


def derived_targets(probs, y, grad_norm, loss=None) -> np.ndarray:
    """The five decoder targets ``(L, 1{y = argmax f}, f_y, H, ||dL/dW||)``.

    ``probs`` has shape (..., K); ``y``, ``grad_norm`` and ``loss`` broadcast
    against the leading axes. ``argmax`` ties go to the lowest class index.
    When ``loss`` is omitted it is ``-log f_y``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(y)
    lead = probs.shape[:-1]
    y = np.broadcast_to(y, lead)
    conf = np.take_along_axis(probs, y[..., None].astype(np.int64), axis=-1)[..., 0]
    if loss is None:
        with np.errstate(divide="ignore"):
            loss = -np.log(conf)
    correct = (np.argmax(probs, axis=-1) == y).astype(np.float64)
    ent = normalized_entropy(probs)
    return np.stack([np.broadcast_to(loss, lead).astype(np.float64), correct, conf, ent,
                     np.broadcast_to(grad_norm, lead).astype(np.float64)], axis=-1)


def _observe(net, X, y, grad_idx, out_idx):
    dense_pos = [i for i, s in enumerate(net.layers) if s.kind == "dense"]
    trace = forward(net, X, y=y)
    n = len(y)
    K = trace.logits.shape[1]
    g = trace.probs.copy()
    g[np.arange(n), y] -= 1.0  # per-record loss, so no 1/n
    bt = backward(net, trace, g, record=True)
    inputs = [trace.inputs if p == 0 else trace.activations[p - 1] for p in dense_pos]
    deltas = [bt.output_grads[p] for p in dense_pos]
    norms = np.stack([np.sqrt(np.sum(a * a, axis=1) + 1.0) * np.linalg.norm(d, axis=1)
                      for a, d in zip(inputs, deltas)], axis=1)
    grads = {i: np.einsum("ni,nj->nij", inputs[i], deltas[i]) for i in grad_idx}
    # hidden layer i is the input to dense layer i+1
    outs = {i: inputs[i + 1].copy() for i in out_idx}
    losses = -log_softmax(trace.logits)[np.arange(n), y]
    total = np.sqrt(np.sum(norms**2, axis=1))
    targets = derived_targets(trace.probs, y, total, losses)
    return grads, outs, trace.probs, losses, targets, norms, K


def extract(snapshots, X, y, sel: FeatureSelection | None = None, chunk: int = 1024) -> AttackFeatures:
    """Attack features of records ``(X, y)`` against each snapshot in turn."""
    sel = sel or FeatureSelection()
    snapshots = list(snapshots)
    if not snapshots:
        raise ArgumentError("need at least one snapshot")
    arch = snapshots[0].arch
    for s in snapshots[1:]:
        if s.arch != arch:
            raise ArgumentError("snapshots do not share one architecture")
    if any(s.kind not in ("dense", "relu") for s in arch):
        raise ArgumentError("feature extraction supports dense/relu target models")
    X = np.asarray(X, dtype=np.float64)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if X.ndim == 1:
        X = X[None, :]
    n_dense = sum(s.kind == "dense" for s in arch)
    grad_idx = resolve_layers(sel.grad_layers, n_dense)
    out_idx = resolve_layers(sel.output_layers, n_dense - 1)
    nets = [s.network() for s in snapshots]

    parts = []
    for s in range(0, len(y), chunk):
        Xc, yc = X[s:s + chunk], y[s:s + chunk]
        per_t = [_observe(net, Xc, yc, grad_idx, out_idx) for net in nets]
        K = per_t[0][-1]
        stack = lambda j: np.stack([o[j] for o in per_t], axis=1)  # noqa: E731
        grads = {i: np.stack([o[0][i] for o in per_t], axis=1) for i in grad_idx}
        outs = {i: np.stack([o[1][i] for o in per_t], axis=1) for i in out_idx}
        parts.append(AttackFeatures(
            grads, outs,
            stack(2) if sel.include_output else None,
            stack(3) if sel.include_loss else None,
            np.eye(K)[yc] if sel.include_label else None,
            stack(4), stack(5), sel))
    return parts[0] if len(parts) == 1 else AttackFeatures.concat(parts)


def dump_csv(feat: AttackFeatures, path, ids=None, membership=None) -> Path:
    """One row per (record, t) with the selected features flattened."""
    path = Path(path)
    n, T = len(feat), feat.T
    ids = np.arange(n) if ids is None else np.asarray(ids)
    header = ["example", "t"]
    if membership is not None:
        header.append("member")
    header += [f"target_{k}" for k in TARGET_NAMES]
    blocks = []
    if feat.loss is not None:
        header.append("loss")
        blocks.append(lambda r, t: [feat.loss[r, t]])
    if feat.output is not None:
        header += [f"output_{k}" for k in range(feat.output.shape[2])]
        blocks.append(lambda r, t: feat.output[r, t])
    if feat.label is not None:
        header += [f"label_{k}" for k in range(feat.label.shape[1])]
        blocks.append(lambda r, t: feat.label[r])
    for i, h in feat.outputs.items():
        header += [f"h{i}_{j}" for j in range(h.shape[2])]
        blocks.append(lambda r, t, h=h: h[r, t])
    for i, g in feat.grads.items():
        header += [f"grad{i}_{a}_{b}" for a in range(g.shape[2]) for b in range(g.shape[3])]
        blocks.append(lambda r, t, g=g: g[r, t].ravel())
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in range(n):
            for t in range(T):
                row = [int(ids[r]), t]
                if membership is not None:
                    row.append(int(membership[r]))
                row += [repr(float(v)) for v in feat.targets[r, t]]
                for b in blocks:
                    row += [repr(float(v)) for v in b(r, t)]
                w.writerow(row)
    return path
