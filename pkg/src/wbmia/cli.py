"""
Command-line entry point: ``wbmia <command> ...``.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 runtime failure.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from wbmia.attack import (AttackTrainConfig, attack_forward, load_attack, save_attack, train_supervised,
                          train_unsupervised)
from wbmia.data import load_csv, synth_purchase_like, write_csv
from wbmia.errors import ConfigError, WBMIAError
from wbmia.experiment import (Artifacts, ExperimentConfig, _standalone, federated_layout, load_dataset,
                              run_experiment, run_fed, scenario_presets)
from wbmia.features import AttackFeatures, FeatureSelection, dump_csv, extract
from wbmia.metrics import evaluate, read_scores_csv, write_scores_csv
from wbmia.snapshot import load_snapshot

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _load_config(args) -> ExperimentConfig:
    if getattr(args, "preset", None):
        presets = scenario_presets()
        if args.preset not in presets:
            raise ConfigError(f"unknown preset {args.preset!r}; try: {', '.join(presets)}")
        cfg = presets[args.preset]
    elif getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        cfg = ExperimentConfig.load(path)
    else:
        raise ConfigError("give --config FILE or --preset NAME")
    d = cfg.to_dict()
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            d[key] = json.loads(value)
        except json.JSONDecodeError:
            d[key] = value
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    if getattr(args, "out", None):
        d["output_dir"] = args.out
    return ExperimentConfig.from_dict(d).validate()


def cmd_gen_data(args):
    ds = synth_purchase_like(args.n, args.d, args.classes, args.spread, seed=args.seed)
    write_csv(ds, args.out)
    print(f"wrote {len(ds)} records to {args.out}")


def cmd_train_target(args):
    cfg = _load_config(args)
    art = Artifacts(cfg.resolved_output_dir())
    ds = load_dataset(cfg.dataset, cfg.seed)
    _, _, info = _standalone(cfg, ds, art)
    print(json.dumps(info, sort_keys=True))


def cmd_run_fed(args):
    cfg = _load_config(args)
    if cfg.scenario != "federated":
        raise ConfigError("run-fed needs a federated config")
    art = Artifacts(cfg.resolved_output_dir())
    ds = load_dataset(cfg.dataset, cfg.seed)
    lay = federated_layout(cfg, len(ds))
    art.path("layout.json").write_text(json.dumps({k: (v.tolist() if isinstance(v, np.ndarray) else
                                                       [p.tolist() for p in v]) for k, v in lay.items()}))
    results, info = run_fed(cfg, ds, art)
    print(json.dumps({"attack_accuracies": {k: r["attack_accuracy"] for k, r in results.items()}, **info},
                     sort_keys=True))


def _selection(args) -> FeatureSelection:
    def layers(v):
        if v in ("all", "last", "none"):
            return v
        return tuple(int(x) for x in v.split(","))
    return FeatureSelection(layers(args.grad_layers), layers(args.output_layers), not args.no_loss,
                            not args.no_label, not args.no_output)


def cmd_extract(args):
    ds = load_csv(args.data, args.label_column, args.num_classes)
    idx = np.arange(len(ds))
    if args.indices:
        doc = json.loads(Path(args.indices).read_text())
        if args.key:
            if args.key not in doc:
                raise ConfigError(f"{args.indices} has no key {args.key!r}")
            doc = doc[args.key]
        idx = np.asarray(doc, dtype=np.int64)
    snaps = [load_snapshot(p) for p in args.snapshots]
    feat = extract(snaps, *ds.subset(idx), _selection(args))
    feat.save(args.out)
    if args.csv:
        dump_csv(feat, args.csv, ids=idx)
    print(f"extracted {len(feat)} records x {feat.T} observations: {feat.shapes()}")


def _attack_cfg(args) -> AttackTrainConfig:
    return AttackTrainConfig(learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs,
                             kernels=args.kernels)


def cmd_train_attack(args):
    cfg = _attack_cfg(args)
    seed = args.seed or 0
    if args.unsupervised:
        pool = [AttackFeatures.load(p) for p in args.members + (args.nonmembers or [])]
        net, hist = train_unsupervised(AttackFeatures.concat(pool), cfg, seed)
        print(f"final reconstruction loss {hist.loss[-1] if hist.loss else float('nan'):.6g}")
    else:
        if not args.nonmembers:
            raise ConfigError("supervised training needs --nonmembers")
        load = lambda ps: AttackFeatures.concat([AttackFeatures.load(p) for p in ps])  # noqa: E731
        tm = load(args.test_members) if args.test_members else None
        tn = load(args.test_nonmembers) if args.test_nonmembers else None
        net, hist = train_supervised(load(args.members), load(args.nonmembers), cfg, seed, tm, tn)
        if hist.test_acc:
            print(f"best test accuracy {max(hist.test_acc):.4f} at epoch {hist.best_epoch}")
    save_attack(net, args.out)
    print(f"saved attack model to {args.out}")


def cmd_evaluate(args):
    if args.scores:
        ids, scores, membership = read_scores_csv(args.scores)
        if membership is None:
            raise ConfigError(f"{args.scores} has no membership column")
    else:
        if not (args.attack and args.members and args.nonmembers):
            raise ConfigError("evaluate needs --scores, or --attack with --members and --nonmembers")
        net = load_attack(args.attack)
        mem, non = AttackFeatures.load(args.members), AttackFeatures.load(args.nonmembers)
        feat = AttackFeatures.concat([mem, non])
        scores = attack_forward(net, feat)[0]
        membership = np.r_[np.ones(len(mem), bool), np.zeros(len(non), bool)]
        ids = np.arange(len(feat))
        if args.scores_out:
            write_scores_csv(args.scores_out, ids, scores, membership)
    res = evaluate(scores, membership, args.threshold).to_dict()
    text = json.dumps(res, indent=2, sort_keys=True)
    if args.json_out:
        Path(args.json_out).write_text(text + "\n")
    print(json.dumps({k: res[k] for k in ("attack_accuracy", "tpr", "fpr", "auc")}, sort_keys=True))


def cmd_run(args):
    cfg = _load_config(args)
    doc = run_experiment(cfg)
    print(json.dumps({"experiment_id": doc["experiment_id"], "attack_accuracy": doc["attack_accuracy"],
                      "attack_accuracies": doc["attack_accuracies"],
                      "summary": str(cfg.resolved_output_dir() / "summary.json")}, sort_keys=True))


def cmd_presets(args):
    presets = scenario_presets()
    if args.show:
        if args.show not in presets:
            raise ConfigError(f"unknown preset {args.show!r}")
        print(json.dumps(presets[args.show].to_dict(), indent=2, sort_keys=True))
        return
    if args.write:
        out = Path(args.write)
        out.mkdir(parents=True, exist_ok=True)
        for name, cfg in presets.items():
            cfg.save(out / f"{name}.json")
    for name, cfg in presets.items():
        print(f"{name:28s} {cfg.scenario:10s} {cfg.attacker:24s} {cfg.knowledge}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wbmia", description="White-box membership inference lab.")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--preset", help="named preset instead of --config")
        sp.add_argument("--seed", type=int, help="override the master seed")
        sp.add_argument("--out", help="output directory (default: $WBMIA_OUTPUT_ROOT/<experiment_id>)")
        sp.add_argument("--set", action="append", metavar="KEY=JSON", help="override a top-level field")

    g = sub.add_parser("gen-data", help="write a synthetic purchase-like CSV")
    g.add_argument("--n", type=int, default=4000)
    g.add_argument("--d", type=int, default=200)
    g.add_argument("--classes", type=int, default=20)
    g.add_argument("--spread", type=float, default=0.4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-target", help="train a stand-alone target and save its snapshots")
    with_config(t)
    t.set_defaults(func=cmd_train_target)

    f = sub.add_parser("run-fed", help="simulate federated training and attack one participant")
    with_config(f)
    f.set_defaults(func=cmd_run_fed)

    e = sub.add_parser("extract", help="compute attack features from snapshot files")
    e.add_argument("--data", required=True, help="CSV with a header row")
    e.add_argument("--label-column", default="label")
    e.add_argument("--num-classes", type=int, required=True)
    e.add_argument("--snapshots", nargs="+", required=True, help="snapshot files, in observation order")
    e.add_argument("--indices", help="JSON list of row indices, or an object (see --key)")
    e.add_argument("--key", help="key of the index list inside --indices (e.g. attack_test_members)")
    e.add_argument("--grad-layers", default="last", help="all | last | none | comma-separated indices")
    e.add_argument("--output-layers", default="none", help="all | last | none | comma-separated indices")
    e.add_argument("--no-loss", action="store_true")
    e.add_argument("--no-label", action="store_true")
    e.add_argument("--no-output", action="store_true")
    e.add_argument("--out", required=True, help="features file (.npz)")
    e.add_argument("--csv", help="also dump a flat CSV")
    e.set_defaults(func=cmd_extract)

    a = sub.add_parser("train-attack", help="train an attack model on feature files")
    a.add_argument("--members", nargs="+", required=True)
    a.add_argument("--nonmembers", nargs="+")
    a.add_argument("--test-members", nargs="+")
    a.add_argument("--test-nonmembers", nargs="+")
    a.add_argument("--unsupervised", action="store_true", help="pool all inputs, no labels")
    a.add_argument("--epochs", type=int, default=100)
    a.add_argument("--lr", type=float, default=1e-4)
    a.add_argument("--batch-size", type=int, default=64)
    a.add_argument("--kernels", type=int, default=1000)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_train_attack)

    v = sub.add_parser("evaluate", help="score features with an attack model, or evaluate a scores CSV")
    v.add_argument("--attack")
    v.add_argument("--members")
    v.add_argument("--nonmembers")
    v.add_argument("--scores", help="scores CSV with a membership column")
    v.add_argument("--threshold", type=float, default=0.5)
    v.add_argument("--scores-out")
    v.add_argument("--json-out")
    v.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("run", help="run an experiment end to end")
    with_config(r)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("presets", help="list the shipped scenario presets")
    s.add_argument("--show", help="print one preset as JSON")
    s.add_argument("--write", help="write every preset as <dir>/<name>.json")
    s.set_defaults(func=cmd_presets)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (WBMIAError, OSError, ValueError, ArithmeticError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
