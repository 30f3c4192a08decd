"""Command-line entry point ``advshield``.

Exit codes: 0 success, 2 configuration error, 3 data or format error,
4 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from typing import Optional

import numpy as np

from .attacks import AttackSpec, craft, filter_successful, load_adv, save_adv
from .data import (
    LabeledSet,
    SynthSpec,
    generate_synthetic,
    load_dataset,
    read_split,
    save_tensor,
    split_balanced,
    write_split,
)
from .diffnet import Batch, NetConfig, atomic_write, build_net, file_sha256, load_net, parse_layer, predict, save_net
from .errors import AdvShieldError, ConfigError, DataError
from .evaluation import (
    RiskWeights,
    accuracy,
    detection_scores,
    per_class_auprc,
    risk_ledger_from_run,
    risk_with_uad,
    risk_without_uad,
)
from .experiment import ExperimentPlan, emit_curves, parse_float_list, project_features, read_metrics, run_experiment
from .kvconfig import read_kv
from .training import TrainConfig, trace_csv, train
from .uad import calibrate_thresholds, defend, fit_uad, load_uad, save_uad

log = logging.getLogger("advshield")


def _need(args, name: str) -> str:
    val = getattr(args, name, None)
    if val is None:
        raise ConfigError(f"--{name.replace('_', '-')} is required for this command")
    return val


def _split_dir_or_file(path: str, default_name: str) -> str:
    return os.path.join(path, default_name) if os.path.isdir(path) else path


def _labeled(path: str) -> LabeledSet:
    ds, _ = load_dataset(path)
    if not isinstance(ds, LabeledSet):
        raise DataError(f"{path} carries no labels")
    return ds



# -- data -----------------------------------------------------------------------

def cmd_data_gen(args) -> None:
    kv = read_kv(args.spec or _need(args, "config"))
    conv = {"num_classes": int, "noise": float, "samples_per_class": int, "amplitude": float, "seed": int,
            "name": str, "image_dims": lambda s: tuple(int(v) for v in s.replace(",", " ").split())}
    try:
        fields = {k: conv[k](v) for k, v in kv.items()}
    except KeyError as exc:
        raise ConfigError(f"unknown synthetic spec key {exc.args[0]!r}") from None
    if args.seed is not None:
        fields["seed"] = args.seed
    pool, manifest = generate_synthetic(SynthSpec(**fields))
    out = _need(args, "out")
    os.makedirs(out, exist_ok=True)
    save_tensor(os.path.join(out, "pool.adtn"), pool.x, pool.y)
    atomic_write(os.path.join(out, "manifest.json"), manifest.to_json().encode())
    print(f"wrote {len(pool)} samples to {out}")


def cmd_data_split(args) -> None:
    path = _split_dir_or_file(args.data, "pool.adtn")
    pool, manifest = load_dataset(path)
    if manifest is None:
        raise DataError(f"no manifest.json next to {path}")
    split = split_balanced(pool, args.train, args.unlabeled, args.test,
                           args.seed if args.seed is not None else 0, len(manifest.class_names))
    out = _need(args, "out")
    write_split(out, split, manifest)
    print(json.dumps({k: v for k, v in split.counts.items()}, sort_keys=True))


# -- training and attacks ---------------------------------------------------------

def cmd_train(args) -> None:
    kv = read_kv(args.config) if args.config else {}
    hidden = kv.pop("hidden", None) or args.hidden
    if args.seed is not None:
        kv["seed"] = args.seed
    cfg = TrainConfig.from_mapping(kv, regime=args.regime)
    train_set, unlabeled, _, manifest = read_split(args.data)
    layers = tuple(parse_layer(t) for t in hidden.replace(",", " ").split())
    net = build_net(NetConfig(train_set.x.shape[1:], layers, len(manifest.class_names), seed=cfg.seed))
    net, trace = train(net, train_set, unlabeled if cfg.regime == "ssat" else None, cfg)
    out = _need(args, "out")
    digest = save_net(net, out)
    atomic_write(args.trace or out + ".trace.csv", trace_csv(trace).encode())
    print(f"{out} sha256={digest}")


def cmd_attack(args) -> None:
    net = load_net(args.model)
    data = _labeled(_split_dir_or_file(args.data, "test.adtn"))
    if args.method == "cw":
        spec = AttackSpec("cw", 0.0, args.steps or 100, cw_constant=args.c, cw_lr=args.cw_lr)
    else:
        spec = AttackSpec(args.method, args.eps, args.steps or 10, args.step_size, random_start=args.random_start)
    adv = craft(net, Batch(data.x, data.y), spec, seed=args.seed or 0)
    out = _need(args, "out")
    save_adv(out, adv)
    print(f"{adv.count} of {len(adv)} attacks succeeded; wrote {out}")


# -- detector -------------------------------------------------------------------

def cmd_fit_uad(args) -> None:
    net = load_net(args.model)
    data = _labeled(_split_dir_or_file(args.data, "train.adtn"))
    uad = fit_uad(net, data.x, data.y, args.components, args.diag_reg, seed=args.seed or 0)
    uad.model_hash = file_sha256(args.model)
    save_uad(uad, _need(args, "out"))
    print(f"fitted {uad.num_classes} class GMMs with {args.components} component(s)")


def cmd_calibrate(args) -> None:
    net = load_net(args.model)
    uad = load_uad(args.detector)
    ds, _ = load_dataset(_split_dir_or_file(args.data, "unlabeled.adtn"))
    uad = calibrate_thresholds(uad, net, ds.x, args.percentile)
    save_uad(uad, args.out or args.detector)
    print("thresholds " + " ".join(f"{t:.6f}" for t in uad.thresholds))


def cmd_infer(args) -> None:
    net = load_net(args.model)
    ds, _ = load_dataset(args.data)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if args.detector:
        acc, pred, score = defend(net, load_uad(args.detector), ds.x)
        w.writerow(["index", "decision", "label", "score"])
        for i, (a, p, s) in enumerate(zip(acc, pred, score)):
            w.writerow([i, "accept" if a else "reject", int(p) if a else "", f"{s:.6f}"])
    else:
        w.writerow(["index", "label"])
        for i, p in enumerate(predict(net, ds.x)):
            w.writerow([i, int(p)])
    if args.out:
        atomic_write(args.out, buf.getvalue().encode())
    else:
        sys.stdout.write(buf.getvalue())


def cmd_eval(args) -> None:
    net = load_net(args.model)
    test = _labeled(_split_dir_or_file(args.data, "test.adtn"))
    adv = load_adv(args.adv, test.x)
    weights = RiskWeights(*parse_float_list(args.weights))
    uad = load_uad(args.detector) if args.detector else None
    filtered = not args.raw
    bare = risk_ledger_from_run(net, None, test, adv, filtered)
    report = {
        "clean_accuracy": accuracy(predict(net, test.x), test.y),
        "adv_accuracy": accuracy(predict(net, adv.x_adv), adv.y),
        "n_success": filter_successful(adv, net).count,
        "ledger_without_uad": bare.as_dict(),
        "risk_without_uad": risk_without_uad(bare, weights),
    }
    if uad is not None:
        led = risk_ledger_from_run(net, uad, test, adv, filtered)
        succ = filter_successful(adv, net)
        per, macro = (per_class_auprc(detection_scores(net, uad, test.x, succ.x_adv), uad.num_classes)
                      if len(succ) else ([None] * uad.num_classes, None))
        report.update(ledger_with_uad=led.as_dict(), risk_with_uad=risk_with_uad(led, weights),
                      auprc_per_class=per, macro_auprc=macro)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        atomic_write(args.out, text.encode())
    sys.stdout.write(text)


# -- experiments ----------------------------------------------------------------

def cmd_run(args) -> None:
    plan_path = args.plan or _need(args, "config")
    kv = read_kv(plan_path)
    if args.seed is not None:
        kv["seed"] = str(args.seed)
    plan = ExperimentPlan.from_kv(kv)
    out = args.out or plan.out
    if not out:
        raise ConfigError("give an output directory with --out or 'out =' in the plan")
    record = run_experiment(plan, out)
    print(f"config_hash={record.config_hash} reports in {os.path.join(out, 'reports')}")


def cmd_curves(args) -> None:
    rows = read_metrics(os.path.join(args.run, "reports", "metrics.csv"))
    with open(os.path.join(args.run, "reports", "metrics.csv")) as fh:
        first = fh.readline()
    stamp = first if first.startswith("#") else ""
    for path in emit_curves(rows, args.out or os.path.join(args.run, "curves"), stamp):
        print(path)


def cmd_project(args) -> None:
    net = load_net(args.model)
    ds, _ = load_dataset(args.data)
    x = ds.x
    labels = getattr(ds, "y", None)
    flags = np.zeros(len(x), bool)
    if args.adv:
        adv = load_adv(args.adv, x)
        if args.successful_only:
            adv = filter_successful(adv, net)
        x = np.concatenate([np.asarray(x, np.float64), adv.x_adv])
        labels = None if labels is None else np.concatenate([labels, adv.y])
        flags = np.r_[flags, np.ones(len(adv), bool)]
    project_features(net, x, labels, flags, out=_need(args, "out"))
    print(f"projected {len(x)} samples to {args.out}")


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output file or directory")
    common.add_argument("--config", default=argparse.SUPPRESS, help="key=value configuration file")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="advshield", parents=[common],
                                description="Adversarial training, detection and risk evaluation.")
    sub = p.add_subparsers(dest="command", required=True)

    data = sub.add_parser("data", help="generate or split datasets")
    dsub = data.add_subparsers(dest="data_command", required=True)
    g = dsub.add_parser("gen", parents=[common], help="generate the synthetic pool")
    g.add_argument("--spec", help="synthetic spec file (key=value)")
    g.set_defaults(func=cmd_data_gen)
    s = dsub.add_parser("split", parents=[common], help="balanced train/unlabeled/test split")
    s.add_argument("--data", required=True, help="pool container or directory holding pool.adtn")
    s.add_argument("--train", type=int, required=True)
    s.add_argument("--unlabeled", type=int, required=True)
    s.add_argument("--test", type=int, required=True)
    s.set_defaults(func=cmd_data_split)

    t = sub.add_parser("train", parents=[common], help="train one regime")
    t.add_argument("--regime", choices=["nt", "at", "ssat"], required=True)
    t.add_argument("--data", required=True, help="split directory")
    t.add_argument("--hidden", default="64,32", help="hidden layers, e.g. 'conv4x3,32'")
    t.add_argument("--trace", help="loss trace CSV (default: <out>.trace.csv)")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("attack", parents=[common], help="craft adversarial examples")
    a.add_argument("--model", required=True)
    a.add_argument("--data", required=True, help="labeled container or split directory")
    a.add_argument("--method", choices=["fgsm", "pgd", "cw"], default="pgd")
    a.add_argument("--eps", type=float, default=0.0)
    a.add_argument("--steps", type=int)
    a.add_argument("--step-size", type=float)
    a.add_argument("--random-start", action="store_true")
    a.add_argument("--c", type=float, default=1.0, help="C&W constant")
    a.add_argument("--cw-lr", type=float, default=0.01)
    a.set_defaults(func=cmd_attack)

    f = sub.add_parser("fit-uad", parents=[common], help="fit per-class GMMs on clean training features")
    f.add_argument("--model", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--components", type=int, default=1)
    f.add_argument("--diag-reg", type=float)
    f.set_defaults(func=cmd_fit_uad)

    c = sub.add_parser("calibrate", parents=[common], help="set per-class rejection thresholds")
    c.add_argument("--model", required=True)
    c.add_argument("--detector", required=True)
    c.add_argument("--data", required=True, help="held-out clean container or split directory")
    c.add_argument("--percentile", type=float, default=5.0)
    c.set_defaults(func=cmd_calibrate)

    i = sub.add_parser("infer", parents=[common], help="predict, optionally behind the detector")
    i.add_argument("--model", required=True)
    i.add_argument("--detector")
    i.add_argument("--data", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", parents=[common], help="accuracy, AUPRC and risk for one attack archive")
    e.add_argument("--model", required=True)
    e.add_argument("--detector")
    e.add_argument("--data", required=True)
    e.add_argument("--adv", required=True)
    e.add_argument("--weights", default="1,1,1")
    e.add_argument("--raw", action="store_true", help="count every crafted input, not only successful ones")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("run", parents=[common], help="run a full experiment plan")
    r.add_argument("plan", nargs="?", help="plan file (or use --config)")
    r.set_defaults(func=cmd_run)

    cu = sub.add_parser("curves", parents=[common], help="accuracy-vs-budget CSVs from a finished run")
    cu.add_argument("--run", required=True)
    cu.set_defaults(func=cmd_curves)

    pr = sub.add_parser("project", parents=[common], help="2-D principal-component view of features")
    pr.add_argument("--model", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--adv")
    pr.add_argument("--successful-only", action="store_true")
    pr.set_defaults(func=cmd_project)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name in ("seed", "out", "config", "verbose"):
        if not hasattr(args, name):
            setattr(args, name, None)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except AdvShieldError as exc:
        print(f"advshield: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"advshield: error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
