"""
FedAvg simulation with hooks for curious and malicious adversaries.

Each round every participant downloads parameters, trains on its own split
for ``local_epochs_per_round`` epochs and uploads the result; the server
replaces the global parameters with the unweighted element-wise mean of the
uploads. A *global* adversary (the server) records every upload at the
observed rounds; a *local* adversary (one participant) records only the
aggregates it receives.

Active modes:

``gradient_ascent``
    parameters are pushed up the loss surface of the target records,
    ``W + gamma * sum_x dL(x)/dW``. A local adversary perturbs its own upload;
    a global adversary perturbs what the victim downloads (or, with
    ``ascent_via="aggregate"``, the aggregate sent to everybody).
``isolate``
    the victim gets back its own last upload instead of the aggregate; the
    other participants average without it unless
    ``isolation_excludes_victim`` is false.
``isolate_gradient_ascent``
    both.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from wbmia import rng as _rng
from wbmia.errors import ArgumentError
from wbmia.nn import Network, loss_and_backward
from wbmia.snapshot import ModelSnapshot, save_snapshot
from wbmia.target import TargetConfig, accuracy, train_epoch

ATTACK_MODES = ("passive", "gradient_ascent", "isolate", "isolate_gradient_ascent")


@dataclass
class FedConfig:
    participant_splits: list
    rounds: int = 20
    local_epochs_per_round: int = 1
    observed_rounds: list = field(default_factory=list)
    attacker_role: str = "global"
    attacker_id: int = 0
    attack_mode: str = "passive"
    gamma: float = 0.0
    target_batch: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    isolation_excludes_victim: bool = True
    ascent_via: str = "download"

    def __post_init__(self):
        self.participant_splits = [np.asarray(s, dtype=np.int64) for s in self.participant_splits]
        self.target_batch = np.asarray(self.target_batch, dtype=np.int64)
        self.observed_rounds = sorted(set(int(r) for r in self.observed_rounds))
        N = self.num_participants
        if N < 2:
            raise ArgumentError("federated learning needs at least 2 participants")
        if any(len(s) == 0 for s in self.participant_splits):
            raise ArgumentError("every participant needs training data")
        if self.rounds < 0 or self.local_epochs_per_round < 1:
            raise ArgumentError("rounds >= 0 and local_epochs_per_round >= 1 required")
        if self.observed_rounds and (self.observed_rounds[0] < 1 or self.observed_rounds[-1] > self.rounds):
            raise ArgumentError(f"observed rounds must lie in [1, {self.rounds}]")
        if self.attacker_role not in ("global", "local"):
            raise ArgumentError(f"unknown attacker role {self.attacker_role!r}")
        if self.attack_mode not in ATTACK_MODES:
            raise ArgumentError(f"unknown attack mode {self.attack_mode!r}")
        if not 0 <= self.attacker_id < N:
            raise ArgumentError(f"participant id {self.attacker_id} out of range [0, {N})")
        if self.isolating and self.attacker_role != "global":
            raise ArgumentError("isolation requires the global (server) attacker role")
        if self.gamma < 0:
            raise ArgumentError("gamma must be >= 0")
        if self.ascent_via not in ("download", "aggregate"):
            raise ArgumentError(f"unknown ascent placement {self.ascent_via!r}")

    @property
    def num_participants(self) -> int:
        return len(self.participant_splits)

    @property
    def isolating(self) -> bool:
        return self.attack_mode in ("isolate", "isolate_gradient_ascent")

    @property
    def ascending(self) -> bool:
        return self.attack_mode in ("gradient_ascent", "isolate_gradient_ascent")


@dataclass
class ObservationLog:
    """What the adversary saw.

    ``entries[t]`` maps participant id to parameter list (global role) or holds
    the single key ``"aggregate"`` (local role).
    """

    role: str
    arch: tuple
    rounds: list = field(default_factory=list)
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.rounds)

    def snapshots(self, who=None) -> list[ModelSnapshot]:
        """Observed models in round order; ``who`` is a participant id (global role)."""
        key = "aggregate" if self.role == "local" else who
        if key is None:
            raise ArgumentError("global-role logs need a participant id")
        return [ModelSnapshot(r, e[key], self.arch, {"round": r, "party": str(key)})
                for r, e in zip(self.rounds, self.entries)]

    def save(self, directory) -> Path:
        """One snapshot file per (round, party) plus ``manifest.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = []
        for r, entry in zip(self.rounds, self.entries):
            for party, params in entry.items():
                name = f"round{r:04d}_{party}.wbms"
                save_snapshot(ModelSnapshot(r, params, self.arch, {"round": r, "party": str(party)}),
                              directory / name)
                files.append({"file": name, "round": r, "party": str(party)})
        manifest = {"role": self.role, "rounds": self.rounds, "files": files}
        path = directory / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return path


def fedavg(uploads) -> list:
    """Unweighted element-wise mean of parameter lists.

    Computed as offsets from the first upload so that identical uploads
    average to themselves bit for bit ((x + x + x) / 3 need not round to x).
    """
    uploads = list(uploads)
    if not uploads:
        raise ArgumentError("nothing to aggregate")
    out = []
    for ps in zip(*uploads):
        base = np.asarray(ps[0], dtype=np.float64)
        out.append(base + np.mean(np.stack([np.asarray(p) - base for p in ps]), axis=0))
    return out


def ascent_gradient(params, arch, X, y) -> list:
    """``sum_x dL(x)/dW`` over the target records at ``params``."""
    net = Network(list(arch), [np.array(p, dtype=np.float64) for p in params])
    _, grads = loss_and_backward(net, X, y)
    return [g * len(y) for g in grads]


def gradient_ascent_inject(params, arch, X, y, gamma: float) -> list:
    """Return ``params + gamma * sum_x dL(x)/dW``; a new list, inputs untouched."""
    if gamma < 0:
        raise ArgumentError("gamma must be >= 0")
    params = [np.array(p, dtype=np.float64) for p in params]
    if gamma == 0 or len(y) == 0:
        return params
    grads = ascent_gradient(params, arch, X, y)
    return [p + gamma * g for p, g in zip(params, grads)]


def isolate_participant(uploads, victim: int, exclude_victim: bool = True):
    """Downloads for the next round when ``victim`` is isolated.

    The victim gets its own upload back; everybody else gets the mean of the
    other uploads (or of all uploads when ``exclude_victim`` is false).
    Returns ``(downloads, aggregate_seen_by_others)``.
    """
    N = len(uploads)
    if not 0 <= victim < N:
        raise ArgumentError(f"victim id {victim} out of range [0, {N})")
    others = [u for i, u in enumerate(uploads) if i != victim] if exclude_victim else uploads
    agg = fedavg(others)
    downloads = [[p.copy() for p in uploads[victim]] if i == victim else [p.copy() for p in agg]
                 for i in range(N)]
    return downloads, agg


@dataclass
class FedResult:
    final: ModelSnapshot
    log: ObservationLog
    accuracies: list
    held: list
    uploads: list


def run_federated(ds, cfg: FedConfig, target_cfg: TargetConfig, seed: int, test_idx=None) -> FedResult:
    """Simulate ``cfg.rounds`` rounds of FedAvg.

    ``accuracies[r-1]`` holds the round-``r`` aggregate's test accuracy (if
    ``test_idx`` is given) and each participant's training accuracy on its
    upload. Participant ``p`` shuffles with the stream keyed by
    ``(seed, "local", p, round, epoch)`` and keeps its own optimizer state
    across rounds.
    """
    if target_cfg.layer_sizes[0] != ds.dim or target_cfg.num_classes != ds.num_classes:
        raise ArgumentError("target layer sizes do not fit the dataset")
    N = cfg.num_participants
    arch = tuple(target_cfg.layers())
    init = Network.init(list(arch), seed=_rng.draw_seed(_rng.stream(seed, "fed-init")))
    global_params = [p.copy() for p in init.params]
    downloads = [[p.copy() for p in global_params] for _ in range(N)]
    opts = [target_cfg.optimizer.fresh() for _ in range(N)]
    data = [ds.subset(s) for s in cfg.participant_splits]
    Xt, yt = ds.subset(cfg.target_batch)
    victim = cfg.attacker_id
    log = ObservationLog(cfg.attacker_role, arch)
    accs = []
    uploads = []
    for r in range(1, cfg.rounds + 1):
        if cfg.ascending and cfg.attacker_role == "global":
            if cfg.ascent_via == "download":
                downloads[victim] = gradient_ascent_inject(downloads[victim], arch, Xt, yt, cfg.gamma)
            else:
                pushed = gradient_ascent_inject(global_params, arch, Xt, yt, cfg.gamma)
                downloads = [[p.copy() for p in pushed] if not (cfg.isolating and i == victim)
                             else downloads[i] for i in range(N)]
        uploads = []
        for p in range(N):
            net = Network(list(arch), [q.copy() for q in downloads[p]])
            X, y = data[p]
            for e in range(cfg.local_epochs_per_round):
                train_epoch(net, opts[p], X, y, target_cfg.batch_size, _rng.stream(seed, "local", p, r, e))
            up = net.params
            if cfg.ascending and cfg.attacker_role == "local" and p == victim:
                up = gradient_ascent_inject(up, arch, Xt, yt, cfg.gamma)
            uploads.append(up)
        if cfg.isolating:
            downloads, global_params = isolate_participant(uploads, victim, cfg.isolation_excludes_victim)
        else:
            global_params = fedavg(uploads)
            downloads = [[q.copy() for q in global_params] for _ in range(N)]
        if r in cfg.observed_rounds:
            if cfg.attacker_role == "global":
                log.rounds.append(r)
                log.entries.append({p: tuple(_frozen(u)) for p, u in enumerate(uploads)})
            else:
                log.rounds.append(r)
                log.entries.append({"aggregate": tuple(_frozen(global_params))})
        row = {"round": r, "participant_train_acc": [
            accuracy(Network(list(arch), [q for q in uploads[p]]), *data[p]) for p in range(N)]}
        if test_idx is not None and len(test_idx):
            row["aggregate_test_acc"] = accuracy(Network(list(arch), list(global_params)),
                                                 *ds.subset(test_idx))
        accs.append(row)
    final = ModelSnapshot.of(Network(list(arch), [p.copy() for p in global_params]), cfg.rounds)
    return FedResult(final, log, accs, downloads, uploads)


def _frozen(params):
    out = []
    for p in params:
        c = np.array(p, dtype=np.float64, copy=True)
        c.setflags(write=False)
        out.append(c)
    return out
