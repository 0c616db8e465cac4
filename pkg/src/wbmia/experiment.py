"""
End-to-end experiments: dataset, target model(s), observations, features,
attack training and evaluation, driven by one JSON-serialisable config.

Every random choice derives from ``ExperimentConfig.seed``; running the same
config twice writes byte-identical summaries.
"""

import json
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from wbmia import rng as _rng
from wbmia.attack import (AttackTrainConfig, attack_forward, cluster_membership, save_attack,
                          train_supervised, train_unsupervised)
from wbmia.data import load_csv, make_split, split_participants, synth_purchase_like
from wbmia.errors import ArgumentError, ConfigError, StageError, WBMIAError
from wbmia.federated import ATTACK_MODES, FedConfig, run_federated
from wbmia.features import AttackFeatures, FeatureSelection, extract
from wbmia.metrics import evaluate, grad_norm_report, write_scores_csv, write_summary
from wbmia.snapshot import save_snapshot
from wbmia.target import TargetConfig, finetune_target, train_target

OUTPUT_ROOT_ENV = "WBMIA_OUTPUT_ROOT"
SCENARIOS = ("standalone", "finetune", "federated")


def _default_dataset():
    return {"kind": "synthetic", "n": 4000, "d": 200, "num_classes": 20, "spread": 0.4}


def _default_split():
    return {"target_train": 1000, "target_test": 1000, "attack_train_members": 500,
            "attack_train_nonmembers": 500, "attack_test": 500, "finetune": 0}


def _default_target():
    return TargetConfig([200, 256, 128, 20], epochs=40).to_dict()


def _default_attack():
    return AttackTrainConfig(kernels=16).to_dict()


@dataclass
class ExperimentConfig:
    """One experiment.

    ``attacker`` is ``passive`` or an active federated mode; ``placement`` is
    ``global`` / ``local`` and only meaningful for federated runs.
    ``observed`` lists the epochs (stand-alone) or rounds (federated) whose
    models the attacker sees; empty means the final model only. ``fed``
    holds ``participants``, ``participant_size``, ``rounds``,
    ``local_epochs``, ``gamma``, ``attack_train`` and ``attack_test`` (per
    class sizes), ``isolation_excludes_victim`` and ``ascent_via``.
    ``finetune`` holds the fine-tuning ``epochs``. ``sweep`` is either
    ``{"observed_sets": [[...], ...]}`` or ``{"train_sizes": [...]}``.
    """

    experiment_id: str = "experiment"
    scenario: str = "standalone"
    attacker: str = "passive"
    placement: str | None = None
    attacker_id: int = 0
    knowledge: str = "supervised"
    features: dict = field(default_factory=lambda: FeatureSelection().to_dict())
    dataset: dict = field(default_factory=_default_dataset)
    split: dict = field(default_factory=_default_split)
    target: dict = field(default_factory=_default_target)
    observed: list = field(default_factory=list)
    fed: dict | None = None
    finetune: dict | None = None
    sweep: dict | None = None
    attack: dict = field(default_factory=_default_attack)
    dump_features: bool = False
    seed: int = 0
    output_dir: str | None = None

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(doc)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    # -- derived pieces --------------------------------------------------
    def target_config(self) -> TargetConfig:
        return TargetConfig.from_dict(self.target)

    def attack_config(self) -> AttackTrainConfig:
        return AttackTrainConfig(**self.attack)

    def selection(self) -> FeatureSelection:
        return FeatureSelection.from_dict(self.features)

    def resolved_output_dir(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / self.experiment_id

    def validate(self) -> "ExperimentConfig":
        """Reject invalid configs before any work; messages name the broken rule."""
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.attacker not in ATTACK_MODES:
            raise ConfigError(f"attacker must be one of {ATTACK_MODES}, got {self.attacker!r}")
        fed = self.scenario == "federated"
        if self.attacker != "passive" and not fed:
            raise ConfigError(f"active attacker {self.attacker!r} requires scenario 'federated'")
        if self.placement is not None and not fed:
            raise ConfigError("placement requires scenario 'federated'")
        if fed and self.placement not in ("global", "local"):
            raise ConfigError("federated experiments need placement 'global' or 'local'")
        if self.knowledge not in ("supervised", "unsupervised"):
            raise ConfigError(f"knowledge must be supervised or unsupervised, got {self.knowledge!r}")
        if fed != (self.fed is not None):
            raise ConfigError("the fed section is required for, and only for, federated experiments")
        if (self.scenario == "finetune") != (self.finetune is not None):
            raise ConfigError("the finetune section is required for, and only for, fine-tuning experiments")
        if self.sweep is not None:
            keys = set(self.sweep)
            if keys not in ({"observed_sets"}, {"train_sizes"}):
                raise ConfigError("sweep must hold exactly one of observed_sets or train_sizes")
            if "train_sizes" in keys and self.scenario != "standalone":
                raise ConfigError("train_sizes sweeps are stand-alone only")
            if "observed_sets" in keys and not all(self.sweep["observed_sets"]):
                raise ConfigError("observed_sets entries must be non-empty")
        try:
            tcfg = self.target_config()
            self.attack_config()
            self.selection()
        except (TypeError, ArgumentError) as e:
            raise ConfigError(f"invalid sub-config: {e}") from e
        if fed:
            self._check_fed()
        ds = self.dataset
        if ds.get("kind") not in ("synthetic", "csv"):
            raise ConfigError("dataset kind must be synthetic or csv")
        if ds["kind"] == "synthetic":
            if tcfg.layer_sizes[0] != ds["d"] or tcfg.num_classes != ds["num_classes"]:
                raise ConfigError(f"target layer sizes {tcfg.layer_sizes} do not fit d={ds['d']}, "
                                  f"K={ds['num_classes']}")
            self._check_sizes(ds["n"])
        return self

    def _check_sizes(self, n: int):
        s = self.split
        if self.scenario == "federated":
            f = self.fed
            need = f["participants"] * f["participant_size"] + f["attack_train"] + f["attack_test"]
            if need > n:
                raise ConfigError(f"federated sizes need {need} records, dataset has {n} (deficit {need - n})")
            if f["attack_train"] + f["attack_test"] > f["participant_size"]:
                raise ConfigError("attack member sets exceed one participant's data")
            return
        sizes = [s["target_train"]] + list((self.sweep or {}).get("train_sizes", []))
        for train in sizes:
            try:
                make_split(n, train, s["target_test"], s["attack_train_members"],
                           s["attack_train_nonmembers"], s["attack_test"], seed=0,
                           finetune=s.get("finetune", 0))
            except ArgumentError as e:
                raise ConfigError(f"infeasible split: {e}") from e
        if self.scenario == "finetune" and s.get("finetune", 0) < s["attack_train_members"] + s["attack_test"]:
            raise ConfigError("finetune set must cover the attack train and test sizes")

    def _check_fed(self):
        need = {"participants", "participant_size", "rounds", "attack_train", "attack_test"}
        missing = sorted(need - set(self.fed))
        if missing:
            raise ConfigError(f"fed section lacks {', '.join(missing)}")
        rounds = self.observed_sets() or [[self.fed["rounds"]]]
        for rs in rounds:
            if min(rs) < 1 or max(rs) > self.fed["rounds"]:
                raise ConfigError(f"observed rounds {rs} outside [1, {self.fed['rounds']}]")
        if self.attacker in ("isolate", "isolate_gradient_ascent") and self.placement != "global":
            raise ConfigError("isolation requires placement 'global'")
        if not 0 <= self.attacker_id < self.fed["participants"]:
            raise ConfigError("attacker_id out of range")

    def observed_sets(self) -> list:
        if self.sweep and "observed_sets" in self.sweep:
            return [sorted(int(r) for r in rs) for rs in self.sweep["observed_sets"]]
        return [sorted(int(r) for r in self.observed)] if self.observed else []


class Artifacts:
    """Paths under one experiment's output directory."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p


@contextmanager
def stage(name: str):
    try:
        yield
    except (StageError, ConfigError):
        raise
    except (WBMIAError, ValueError, ArithmeticError, OSError, KeyError) as e:
        raise StageError(name, e) from e


def load_dataset(spec: dict, seed: int):
    if spec["kind"] == "synthetic":
        return synth_purchase_like(spec["n"], spec["d"], spec["num_classes"], spec.get("spread", 0.4),
                                   seed=spec.get("seed", seed))
    return load_csv(spec["path"], spec.get("label_column", "label"), spec["num_classes"])


@dataclass
class AttackTask:
    """A binary attack: positives vs negatives, observed through ``snapshots``."""

    name: str
    snapshots: list
    train_pos: np.ndarray
    train_neg: np.ndarray
    test_pos: np.ndarray
    test_neg: np.ndarray


def run_task(task: AttackTask, ds, cfg: ExperimentConfig, art: Artifacts, extra_meta=None) -> dict:
    """Extract features, train the attack, score the balanced test sets."""
    sel = cfg.selection()
    acfg = cfg.attack_config()
    seed = _rng.draw_seed(_rng.stream(cfg.seed, "attack", task.name))
    with stage(f"{task.name}/extract"):
        parts = {k: extract(task.snapshots, *ds.subset(getattr(task, k)), sel)
                 for k in ("train_pos", "train_neg", "test_pos", "test_neg")}
        if cfg.dump_features:
            for k, f in parts.items():
                f.save(art.path("features", f"{task.name}_{k}.npz"))
    test = AttackFeatures.concat([parts["test_pos"], parts["test_neg"]])
    truth = np.r_[np.ones(len(task.test_pos), bool), np.zeros(len(task.test_neg), bool)]
    ids = np.r_[task.test_pos, task.test_neg]
    with stage(f"{task.name}/attack"):
        if cfg.knowledge == "supervised":
            net, hist = train_supervised(parts["train_pos"], parts["train_neg"], acfg, seed,
                                         parts["test_pos"], parts["test_neg"])
            scores = attack_forward(net, test)[0]
            result = evaluate(scores, truth, 0.5)
            history = {"best_epoch": hist.best_epoch, "test_acc": hist.test_acc}
        else:
            pool = AttackFeatures.concat([parts["train_pos"], parts["train_neg"]])
            net, hist = train_unsupervised(pool, acfg, seed)
            z = attack_forward(net, test)[0]
            pred = cluster_membership(z, test.grad_norm.mean(axis=1))
            # orient the embedding so that larger means "member" for the ROC
            sign = 1.0 if z[pred].mean() >= z[~pred].mean() else -1.0
            scores = sign * z
            result = evaluate(scores, truth, 0.5)
            hard = evaluate(pred.astype(float), truth, 0.5)
            result.attack_accuracy, result.tpr, result.fpr = hard.attack_accuracy, hard.tpr, hard.fpr
            result.tp, result.tn, result.fp, result.fn = hard.tp, hard.tn, hard.fp, hard.fn
            history = {"final_loss": hist.loss[-1] if hist.loss else None}
        save_attack(net, art.path("attack", f"{task.name}.wbms"))
    with stage(f"{task.name}/report"):
        groups = {}
        for t, snap in enumerate(task.snapshots):
            groups[("member", snap.epoch)] = test.last_grad_norm[truth, t]
            groups[("non-member", snap.epoch)] = test.last_grad_norm[~truth, t]
        rep = grad_norm_report(groups)
        rep.to_csv(art.path("gradnorms", f"{task.name}.csv"))
        result.gradient_norm_summary = rep.summary()
        write_scores_csv(art.path("scores", f"{task.name}.csv"), ids, scores, truth)
    out = result.to_dict()
    out["observed"] = [s.epoch for s in task.snapshots]
    out["history"] = history
    out.update(extra_meta or {})
    return out


def _standalone(cfg, ds, art, train_size=None, tag=""):
    s = dict(cfg.split)
    if train_size is not None:
        s["target_train"] = train_size
    tcfg = cfg.target_config()
    epochs = sorted(set(r for rs in cfg.observed_sets() for r in rs))
    if epochs:
        tcfg = TargetConfig.from_dict({**tcfg.to_dict(), "snapshot_epochs": epochs})
    with stage("split"):
        plan = make_split(len(ds), s["target_train"], s["target_test"], s["attack_train_members"],
                          s["attack_train_nonmembers"], s["attack_test"], seed=cfg.seed,
                          finetune=s.get("finetune", 0))
        art.path(f"split{tag}.json").write_text(json.dumps(plan.to_dict()))
    with stage("target"):
        res = train_target(ds, plan, tcfg, cfg.seed)
        for e, snap in sorted(res.snapshots.items()):
            save_snapshot(snap, art.path(f"snapshots{tag}", f"epoch{e:04d}.wbms"))
        save_snapshot(res.final, art.path(f"snapshots{tag}", "final.wbms"))
    target_info = {"best_epoch": res.best_epoch, "train_acc": res.train_acc[res.best_epoch],
                   "test_acc": res.test_acc[res.best_epoch], "gap": res.gap}
    return plan, res, target_info


def _observation_sets(cfg, snaps_by_epoch, final):
    sets = cfg.observed_sets()
    if not sets:
        return [("final", [final])]
    return [(f"obs_{min(rs)}-{max(rs)}" if len(sets) > 1 else "observed", [snaps_by_epoch[r] for r in rs])
            for rs in sets]


def run_standalone(cfg, ds, art) -> tuple[dict, dict]:
    if cfg.sweep and "train_sizes" in cfg.sweep:
        results, targets = {}, {}
        for size in cfg.sweep["train_sizes"]:
            plan, res, info = _standalone(cfg, ds, art, size, tag=f"_train{size}")
            for name, snaps in _observation_sets(cfg, res.snapshots, res.final):
                task = AttackTask(f"train{size}" + ("" if name == "final" else f"_{name}"), snaps,
                                  plan.attack_train_members, plan.attack_train_nonmembers,
                                  plan.attack_test_members, plan.attack_test_nonmembers)
                results[task.name] = run_task(task, ds, cfg, art, {"train_size": size})
            targets[f"train{size}"] = info
        return results, {"targets": targets}
    plan, res, info = _standalone(cfg, ds, art)
    results = {}
    for name, snaps in _observation_sets(cfg, res.snapshots, res.final):
        task = AttackTask(name, snaps, plan.attack_train_members, plan.attack_train_nonmembers,
                          plan.attack_test_members, plan.attack_test_nonmembers)
        results[name] = run_task(task, ds, cfg, art)
    return results, {"target": info}


def run_finetune(cfg, ds, art) -> tuple[dict, dict]:
    """Base model on D, fine-tuned copy on D_delta; three pairwise attacks on (f, f_delta)."""
    plan, res, info = _standalone(cfg, ds, art)
    with stage("finetune"):
        ft = TargetConfig.from_dict({**cfg.target, "epochs": cfg.finetune.get("epochs", 10),
                                     "snapshot_epochs": []})
        tuned = finetune_target(res.final, ds, plan.finetune, ft, cfg.seed, D=plan.target_train)
        save_snapshot(tuned, art.path("snapshots", "finetuned.wbms"))
    snaps = [res.final, tuned]
    a_tr, a_te = cfg.split["attack_train_members"], cfg.split["attack_test"]
    delta_train, delta_test = plan.finetune[:a_tr], plan.finetune[a_tr:a_tr + a_te]
    d_train, d_test = plan.attack_train_members, plan.attack_test_members
    nm_train = plan.attack_train_nonmembers[:a_tr]
    nm_test = plan.attack_test_nonmembers
    tasks = [AttackTask("D_vs_Dbar", snaps, d_train, nm_train, d_test, nm_test),
             AttackTask("Ddelta_vs_Dbar", snaps, delta_train, nm_train, delta_test, nm_test),
             AttackTask("D_vs_Ddelta", snaps, d_train, delta_train, d_test, delta_test)]
    results = {t.name: run_task(t, ds, cfg, art) for t in tasks}
    return results, {"target": info}


def federated_layout(cfg: ExperimentConfig, n: int):
    """Participant splits and attack index sets for a federated experiment."""
    f = cfg.fed
    perm = _rng.stream(cfg.seed, "fed-layout").permutation(n)
    N, size = f["participants"], f["participant_size"]
    parts = split_participants(perm[:N * size], N, size, seed=cfg.seed)
    pool = perm[N * size:]
    a_tr, a_te = f["attack_train"], f["attack_test"]
    if cfg.placement == "global":
        members = parts[cfg.attacker_id]
    else:
        # a local attacker targets the union of the other participants' data
        others = np.concatenate([p for i, p in enumerate(parts) if i != cfg.attacker_id])
        members = _rng.stream(cfg.seed, "fed-members").permutation(others)
    members = np.asarray(members)
    layout = {"participants": parts,
              "train_pos": np.sort(members[:a_tr]), "test_pos": np.sort(members[a_tr:a_tr + a_te]),
              "train_neg": np.sort(pool[:a_tr]), "test_neg": np.sort(pool[a_tr:a_tr + a_te]),
              "holdout": np.sort(pool[a_tr + a_te:])}
    return layout


def run_fed(cfg, ds, art) -> tuple[dict, dict]:
    f = cfg.fed
    lay = federated_layout(cfg, len(ds))
    sets = cfg.observed_sets() or [[f["rounds"]]]
    observed = sorted(set(r for rs in sets for r in rs))
    target_batch = np.r_[lay["train_pos"], lay["test_pos"], lay["train_neg"], lay["test_neg"]]
    fcfg = FedConfig(lay["participants"], rounds=f["rounds"], local_epochs_per_round=f.get("local_epochs", 1),
                     observed_rounds=observed, attacker_role=cfg.placement, attacker_id=cfg.attacker_id,
                     attack_mode=cfg.attacker, gamma=f.get("gamma", 0.0),
                     target_batch=target_batch if cfg.attacker != "passive" else [],
                     isolation_excludes_victim=f.get("isolation_excludes_victim", True),
                     ascent_via=f.get("ascent_via", "download"))
    tcfg = cfg.target_config()
    with stage("federated"):
        res = run_federated(ds, fcfg, tcfg, cfg.seed, test_idx=lay["holdout"])
        res.log.save(art.root / "observations")
        save_snapshot(res.final, art.path("snapshots", "final_aggregate.wbms"))
    by_round = {s.epoch: s for s in res.log.snapshots(cfg.attacker_id if cfg.placement == "global" else None)}
    results = {}
    for rs in sets:
        name = f"rounds_{min(rs)}-{max(rs)}" if len(sets) > 1 else "observed"
        task = AttackTask(name, [by_round[r] for r in rs], lay["train_pos"], lay["train_neg"],
                          lay["test_pos"], lay["test_neg"])
        results[name] = run_task(task, ds, cfg, art)
    last = res.accuracies[-1] if res.accuracies else {}
    info = {"aggregate_test_acc": last.get("aggregate_test_acc"),
            "participant_train_acc": last.get("participant_train_acc")}
    return results, {"federation": info}


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run one experiment end to end and return its summary document.

    Writes ``summary.json``, ``config.json``, snapshots, attack models,
    score and gradient-norm CSVs under :meth:`ExperimentConfig.resolved_output_dir`.
    """
    cfg.validate()
    art = Artifacts(cfg.resolved_output_dir())
    art.root.mkdir(parents=True, exist_ok=True)
    cfg.save(art.root / "config.json")
    with stage("dataset"):
        ds = load_dataset(cfg.dataset, cfg.seed)
        if cfg.dataset["kind"] == "csv":
            tc = cfg.target_config()
            if tc.layer_sizes[0] != ds.dim or tc.num_classes != ds.num_classes:
                raise ConfigError(f"target layer sizes {tc.layer_sizes} do not fit the CSV data")
            cfg._check_sizes(len(ds))
    runner = {"standalone": run_standalone, "finetune": run_finetune, "federated": run_fed}[cfg.scenario]
    results, info = runner(cfg, ds, art)
    first = next(iter(results.values()))
    headline = {"attack_accuracy": first["attack_accuracy"], "auc": first["auc"],
                "attack_accuracies": {k: r["attack_accuracy"] for k, r in results.items()}}
    doc_path = write_summary(art.path("summary.json"), cfg.experiment_id, cfg.to_dict(), headline,
                             {"results": results, **info})
    return json.loads(doc_path.read_text())


def scenario_presets() -> dict:
    """Named desk-scale configurations of the standard scenarios."""
    fed = {"participants": 4, "participant_size": 500, "rounds": 30, "local_epochs": 3,
           "gamma": 0.0, "attack_train": 100, "attack_test": 100}
    late = [22, 24, 26, 28, 30]
    fed_attack = AttackTrainConfig(kernels=16, epochs=30).to_dict()

    def fed_cfg(name, **kw):
        return ExperimentConfig(name, scenario="federated", placement=kw.pop("placement", "global"),
                                fed={**fed, **kw.pop("fed", {})}, observed=kw.pop("observed", late),
                                attack=fed_attack, **kw)

    presets = [
        ExperimentConfig("standalone-supervised"),
        ExperimentConfig("standalone-unsupervised", knowledge="unsupervised"),
        ExperimentConfig("finetune-three-way", scenario="finetune", finetune={"epochs": 10},
                         split={"target_train": 600, "finetune": 400, "target_test": 1000,
                                "attack_train_members": 250, "attack_train_nonmembers": 250,
                                "attack_test": 150}),
        fed_cfg("fed-passive-global"),
        fed_cfg("fed-passive-local", placement="local", attacker_id=3),
        fed_cfg("fed-active-ascent", attacker="gradient_ascent", fed={"gamma": 1e-4}),
        fed_cfg("fed-active-isolate", attacker="isolate"),
        fed_cfg("fed-active-isolate-ascent", attacker="isolate_gradient_ascent", fed={"gamma": 1e-4}),
        fed_cfg("epoch-sweep", observed=[],
                sweep={"observed_sets": [[2, 4, 6, 8, 10], [12, 14, 16, 18, 20], late]}),
        ExperimentConfig("trainsize-sweep", sweep={"train_sizes": [250, 500, 1000]},
                         split={**_default_split(), "attack_train_members": 100,
                                "attack_train_nonmembers": 100, "attack_test": 100}),
        ExperimentConfig("smoke", dataset={"kind": "synthetic", "n": 800, "d": 50, "num_classes": 10,
                                           "spread": 0.4},
                         split={"target_train": 200, "target_test": 200, "attack_train_members": 100,
                                "attack_train_nonmembers": 100, "attack_test": 100, "finetune": 0},
                         target=TargetConfig([50, 128, 10], epochs=40).to_dict(),
                         attack=AttackTrainConfig(kernels=4, epochs=30, learning_rate=1e-3).to_dict()),
    ]
    return {p.experiment_id: p for p in presets}
