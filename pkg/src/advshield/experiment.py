"""End-to-end experiment plans: train, attack, fit the detector, evaluate, report.

Every stage writes its artifact atomically under the output directory and is
skipped on a rerun when the artifact is already there, so an interrupted run
resumes where it stopped.  Reports depend only on the plan, the data and the
seed; wall-clock timings go to ``run_record.json`` alone.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .attacks import AdvBatch, craft, default_spec, filter_successful, load_adv, save_adv
from .data import read_split
from .diffnet import (
    Batch,
    DiffNet,
    NetConfig,
    atomic_write,
    build_net,
    features,
    file_sha256,
    load_net,
    parse_layer,
    predict,
    save_net,
)
from .errors import AdvShieldError, ConfigError, InputError, StateError
from .evaluation import (
    RiskLedger,
    RiskWeights,
    accuracy,
    detection_scores,
    per_class_auprc,
    risk_ledger_from_run,
    risk_with_uad,
    risk_without_uad,
)
from .kvconfig import dump_kv, parse_kv
from .training import REGIMES, TrainConfig, pseudo_label, pseudo_label_accuracy, trace_csv, train
from .uad import calibrate_thresholds, fit_uad, load_uad, save_uad

log = logging.getLogger(__name__)

TABLE_METHOD = "pgd"


def parse_float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"expected a list of numbers, got {text!r}") from None


def parse_attack_grid(text: str) -> list[tuple[str, list[float]]]:
    """``pgd:0,0.05,0.1; cw:0,1,10`` into ``[(method, values), ...]``."""
    grid = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        if ":" not in part:
            raise ConfigError(f"attack entry {part!r} needs the form method:v1,v2,...")
        method, values = part.split(":", 1)
        method = method.strip().lower()
        if method not in ("fgsm", "pgd", "cw"):
            raise ConfigError(f"unknown attack method {method!r}")
        vals = parse_float_list(values)
        if not vals or any(v < 0 for v in vals) or any(b <= a for a, b in zip(vals, vals[1:])):
            raise ConfigError(f"{method} grid must be non-empty, non-negative and ascending: {vals}")
        grid.append((method, vals))
    if not grid:
        raise ConfigError("the plan needs at least one attack")
    return grid


@dataclass
class ExperimentPlan:
    data: str
    regimes: list[str] = field(default_factory=lambda: ["nt", "at", "ssat"])
    attacks: list[tuple[str, list[float]]] = field(default_factory=lambda: [("pgd", [0.0, 0.05, 0.1, 0.2])])
    table_eps: float = 0.1
    strong_eps: float = 0.2
    pgd_steps: int = 10
    cw_steps: int = 100
    cw_lr: float = 0.01
    hidden: tuple = (64, 32)
    uad_components: int = 1
    uad_diag_reg: Optional[float] = None
    uad_percentile: float = 5.0
    weights: RiskWeights = field(default_factory=RiskWeights)
    filtered: bool = True
    seed: int = 0
    out: Optional[str] = None
    train: dict = field(default_factory=dict)

    def __post_init__(self):
        self.regimes = [r.strip().lower() for r in self.regimes]
        if not self.regimes:
            raise ConfigError("the plan needs at least one regime")
        for r in self.regimes:
            if r not in REGIMES:
                raise ConfigError(f"unknown regime {r!r}")
        if not self.attacks:
            raise ConfigError("the plan needs at least one attack")
        if not 0 <= self.uad_percentile <= 50:
            raise ConfigError("uad_percentile must lie in [0, 50]")
        # validate the training keys early
        self.train_config("nt")

    def train_config(self, regime: str) -> TrainConfig:
        kv = {"seed": self.seed, **self.train}
        return TrainConfig.from_mapping(kv, regime=regime)

    def net_config(self, input_dims, num_classes) -> NetConfig:
        return NetConfig(tuple(input_dims), tuple(self.hidden), num_classes, seed=self.seed)

    def grid_points(self) -> list[tuple[str, float]]:
        return [(m, v) for m, vals in self.attacks for v in vals]

    @classmethod
    def from_kv(cls, kv: dict) -> "ExperimentPlan":
        kv = dict(kv)
        args: dict = {"train": {}}
        for key in list(kv):
            if key.startswith("train."):
                args["train"][key[6:]] = kv.pop(key)
        if "data" not in kv:
            raise ConfigError("the plan must name a data directory (data = DIR)")
        conv = {
            "data": str,
            "out": str,
            "regimes": lambda s: [r for r in s.replace(",", " ").split()],
            "attacks": parse_attack_grid,
            "table_eps": float,
            "strong_eps": float,
            "pgd_steps": int,
            "cw_steps": int,
            "cw_lr": float,
            "hidden": lambda s: tuple(parse_layer(t) for t in s.replace(",", " ").split()),
            "uad_components": int,
            "uad_diag_reg": lambda s: None if s.lower() == "auto" else float(s),
            "uad_percentile": float,
            "weights": lambda s: RiskWeights(*parse_float_list(s)),
            "filtered": lambda s: s.lower() in ("1", "true", "yes"),
            "seed": int,
        }
        for key, val in kv.items():
            if key not in conv:
                raise ConfigError(f"unknown plan key {key!r}")
            try:
                args[key] = conv[key](val)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad value for {key}: {val!r} ({exc})") from None
        return cls(**args)

    @classmethod
    def from_text(cls, text: str) -> "ExperimentPlan":
        return cls.from_kv(parse_kv(text))

    def canonical(self) -> dict:
        """Plan as sorted strings, without the output location and data path."""
        d = {
            "regimes": ",".join(self.regimes),
            "attacks": ";".join(f"{m}:{','.join(repr(v) for v in vals)}" for m, vals in self.attacks),
            "table_eps": repr(self.table_eps),
            "strong_eps": repr(self.strong_eps),
            "pgd_steps": str(self.pgd_steps),
            "cw_steps": str(self.cw_steps),
            "cw_lr": repr(self.cw_lr),
            "hidden": ",".join(str(h) for h in self.hidden),
            "uad_components": str(self.uad_components),
            "uad_diag_reg": "auto" if self.uad_diag_reg is None else repr(self.uad_diag_reg),
            "uad_percentile": repr(self.uad_percentile),
            "weights": f"{self.weights.r_cln_prd!r},{self.weights.r_cln_uad!r},{self.weights.r_adv_prd!r}",
            "filtered": str(self.filtered).lower(),
            "seed": str(self.seed),
        }
        d.update({f"train.{k}": str(v) for k, v in self.train.items()})
        return dict(sorted(d.items()))


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    artifacts: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    failed_stage: Optional[str] = None

    def to_json(self) -> str:
        return json.dumps({"config_hash": self.config_hash, "seed": self.seed,
                           "artifacts": self.artifacts, "timings": self.timings,
                           "failed_stage": self.failed_stage}, indent=2, sort_keys=True) + "\n"


class StageFailed(AdvShieldError):
    """A plan stage raised; carries the stage name and the partial record."""

    def __init__(self, stage: str, cause: Exception, record: RunRecord):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.record = record
        self.exit_code = getattr(cause, "exit_code", 1)


def config_hash(plan: ExperimentPlan) -> str:
    h = hashlib.sha256(dump_kv(plan.canonical()).encode())
    for name in ("train.adtn", "unlabeled.adtn", "test.adtn"):
        path = os.path.join(plan.data, name)
        if os.path.exists(path):
            h.update(file_sha256(path).encode())
    return h.hexdigest()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _csv_text(header: list[str], rows: list[list], stamp: str) -> str:
    buf = io.StringIO()
    buf.write(stamp)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _point_tag(method: str, value: float) -> str:
    return f"{method}_{value!r}".replace(".", "p")


METRIC_COLUMNS = ["regime", "method", "value", "clean_accuracy", "adv_accuracy", "n_attacked", "n_success",
                  "macro_auprc", "N_cln_inc_bare", "N_adv_inc_bare", "N_cln_inc", "N_cln_rej", "N_adv_inc",
                  "N", "risk_without_uad", "risk_with_uad"]


def run_experiment(plan: ExperimentPlan, out: Optional[str] = None) -> RunRecord:
    """Run every (regime, attack point) cell of the plan and write the reports."""
    out = out or plan.out
    if not out:
        raise ConfigError("no output directory given")
    chash = config_hash(plan)
    record = RunRecord(chash, plan.seed)
    rec_path = os.path.join(out, "run_record.json")
    if os.path.exists(rec_path):
        with open(rec_path) as fh:
            old = json.load(fh)
        if old.get("config_hash") != chash:
            raise StateError(f"{out} holds the output of a different plan; choose a fresh directory")
    for sub in ("models", "detectors", "adv", "reports", "curves"):
        os.makedirs(os.path.join(out, sub), exist_ok=True)
    stamp = f"# config_hash={chash} seed={plan.seed}\n"

    def stage(name, fn, *args):
        t0 = time.perf_counter()
        try:
            result = fn(*args)
        except Exception as exc:
            record.failed_stage = name
            atomic_write(rec_path, record.to_json().encode())
            raise StageFailed(name, exc, record) from exc
        record.timings[name] = round(time.perf_counter() - t0, 3)
        return result

    train_set, unlabeled, test, manifest = stage("load-data", read_split, plan.data)
    C = len(manifest.class_names)
    rows, per_class = [], {}
    summary = {"config_hash": chash, "seed": plan.seed, "regimes": {}}
    points = plan.grid_points()
    for pt in ((TABLE_METHOD, plan.table_eps), (TABLE_METHOD, plan.strong_eps)):
        if pt not in points:
            points.append(pt)

    for regime in plan.regimes:
        model_path = os.path.join(out, "models", f"{regime}.adsh")
        trace_path = os.path.join(out, "models", f"{regime}_trace.csv")

        def train_stage():
            if not (os.path.exists(model_path) and os.path.exists(trace_path)):
                net = build_net(plan.net_config(train_set.x.shape[1:], C))
                net, trace = train(net, train_set, unlabeled if regime == "ssat" else None,
                                   plan.train_config(regime))
                atomic_write(trace_path, (stamp + trace_csv(trace)).encode())
                save_net(net, model_path)
            # downstream stages always see the stored float32 weights
            return load_net(model_path), file_sha256(model_path)

        net, mhash = stage(f"train:{regime}", train_stage)
        record.artifacts[f"models/{regime}.adsh"] = mhash
        det_path = os.path.join(out, "detectors", f"{regime}.adud")

        def uad_stage():
            if os.path.exists(det_path):
                uad = load_uad(det_path)
                if uad.model_hash == mhash:
                    return uad
            uad = fit_uad(net, train_set.x, train_set.y, plan.uad_components, plan.uad_diag_reg,
                          seed=plan.seed, num_classes=C)
            uad = calibrate_thresholds(uad, net, unlabeled.x, plan.uad_percentile)
            uad.model_hash = mhash
            save_uad(uad, det_path)
            return load_uad(det_path)

        uad = stage(f"uad:{regime}", uad_stage)
        record.artifacts[f"detectors/{regime}.adud"] = file_sha256(det_path)
        clean_pred = predict(net, test.x)
        clean_acc = accuracy(clean_pred, test.y)
        reg_summary = {"model_sha256": mhash, "clean_accuracy": clean_acc, "cells": {}}
        if regime == "ssat":
            reg_summary["pseudo_label_accuracy"] = pseudo_label_accuracy(pseudo_label(net, unlabeled), unlabeled)

        for method, value in points:
            tag = _point_tag(method, value)
            adv_path = os.path.join(out, "adv", f"{regime}_{tag}.adtn")

            def attack_stage():
                if value == 0:
                    return None
                if not (os.path.exists(adv_path) and os.path.exists(adv_path + ".csv")):
                    spec = default_spec(method, value, plan.cw_steps if method == "cw" else plan.pgd_steps)
                    if method == "cw":
                        spec = replace(spec, cw_lr=plan.cw_lr)
                    save_adv(adv_path, craft(net, Batch(test.x, test.y), spec, seed=plan.seed))
                return load_adv(adv_path, test.x)

            adv = stage(f"attack:{regime}:{tag}", attack_stage)
            row = stage(f"eval:{regime}:{tag}", _evaluate_cell, plan, net, uad, test, adv, C, clean_pred)
            if adv is not None:
                record.artifacts[f"adv/{regime}_{tag}.adtn"] = file_sha256(adv_path)
            rows.append([regime, method, value] + row["values"])
            per_class[(regime, method, value)] = row["per_class"]
            reg_summary["cells"][f"{method}:{value!r}"] = row["summary"]
        summary["regimes"][regime] = reg_summary

    def report_stage():
        written = write_reports(out, plan, rows, per_class, stamp, C)
        written += emit_curves(rows, os.path.join(out, "curves"), stamp)
        path = os.path.join(out, "reports", "summary.json")
        atomic_write(path, (json.dumps(summary, indent=2, sort_keys=True) + "\n").encode())
        return written + [path]

    for path in stage("reports", report_stage):
        record.artifacts[os.path.relpath(path, out)] = file_sha256(path)
    atomic_write(rec_path, record.to_json().encode())
    return record


def _evaluate_cell(plan: ExperimentPlan, net: DiffNet, uad, test, adv: Optional[AdvBatch], C: int,
                   clean_pred: np.ndarray) -> dict:
    clean_acc = accuracy(clean_pred, test.y)
    N = len(test.y)
    if adv is None:
        # zero budget: no attack is made, so there are no adversarial samples
        bare = RiskLedger(int((clean_pred != test.y).sum()), 0, 0, N)
        led = risk_ledger_from_run(net, uad, test, AdvBatch(test.x[:0], test.x[:0], test.y[:0],
                                                            test.y[:0], np.zeros(0, bool)))
        per, macro, adv_acc, n_att, n_succ = [None] * C, None, clean_acc, 0, 0
    else:
        bare = risk_ledger_from_run(net, None, test, adv, plan.filtered)
        led = risk_ledger_from_run(net, uad, test, adv, plan.filtered)
        adv_acc = accuracy(adv.pred, adv.y)
        succ = filter_successful(adv, net)
        n_att, n_succ = len(adv), len(succ)
        per, macro = [None] * C, None
        if n_succ:
            per, macro = per_class_auprc(detection_scores(net, uad, test.x, succ.x_adv), C)
    r_wo, r_w = risk_without_uad(bare, plan.weights), risk_with_uad(led, plan.weights)
    values = [clean_acc, adv_acc, n_att, n_succ, macro, bare.N_cln_inc, bare.N_adv_inc,
              led.N_cln_inc, led.N_cln_rej, led.N_adv_inc, N, r_wo, r_w]
    return {"values": values, "per_class": per,
            "summary": {"clean_accuracy": clean_acc, "adv_accuracy": adv_acc, "n_success": n_succ,
                        "auprc_per_class": per, "macro_auprc": macro,
                        "ledger_without_uad": bare.as_dict(), "ledger_with_uad": led.as_dict(),
                        "risk_without_uad": r_wo, "risk_with_uad": r_w}}


def read_metrics(path) -> list[list]:
    """Rows of ``metrics.csv`` with numeric columns converted back."""
    rows = []
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    for rec in csv.DictReader(lines):
        row = [rec["regime"], rec["method"], float(rec["value"])]
        for col in METRIC_COLUMNS[3:]:
            v = rec[col]
            row.append(None if v == "" else (int(v) if col.startswith(("n_", "N")) else float(v)))
        rows.append(row)
    return rows


def write_reports(out: str, plan: ExperimentPlan, rows: list[list], per_class: dict, stamp: str,
                  C: int) -> list[str]:
    rep = os.path.join(out, "reports")
    written = []
    path = os.path.join(rep, "metrics.csv")
    atomic_write(path, _csv_text(METRIC_COLUMNS, rows, stamp).encode())
    written.append(path)

    col = {name: i for i, name in enumerate(METRIC_COLUMNS)}
    # detection table: one row per regime at the table attack point
    det_rows = []
    for regime in plan.regimes:
        r = _find(rows, regime, TABLE_METHOD, plan.table_eps)
        det_rows.append([regime] + list(per_class[(regime, TABLE_METHOD, plan.table_eps)])
                        + [r[col["macro_auprc"]], r[col["n_success"]]])
    path = os.path.join(rep, "auprc_table.csv")
    header = ["model"] + [f"class{k}" for k in range(C)] + ["average", "n_cases"]
    atomic_write(path, _csv_text(header, det_rows, stamp).encode())
    written.append(path)

    risk_rows = []
    for eps in (plan.table_eps, plan.strong_eps):
        for regime in plan.regimes:
            r = _find(rows, regime, TABLE_METHOD, eps)
            risk_rows.append([regime, TABLE_METHOD, eps, r[col["risk_without_uad"]], r[col["risk_with_uad"]],
                              r[col["adv_accuracy"]]])
    path = os.path.join(rep, "risk_table.csv")
    atomic_write(path, _csv_text(["model", "attack", "epsilon", "risk_without_uad", "risk_with_uad",
                                  "prediction_accuracy"], risk_rows, stamp).encode())
    written.append(path)
    return written


def _find(rows, regime, method, value):
    for r in rows:
        if r[0] == regime and r[1] == method and r[2] == value:
            return r
    raise StateError(f"no result for {regime} {method} {value}")


def emit_curves(rows: list[list], out_dir: str, stamp: str = "") -> list[str]:
    """One ``value,accuracy`` CSV per (regime, method), rows in grid order."""
    os.makedirs(out_dir, exist_ok=True)
    groups: dict[tuple[str, str], list] = {}
    for r in rows:
        groups.setdefault((r[0], r[1]), []).append((r[2], r[4]))
    written = []
    for (regime, method), pts in groups.items():
        pts = sorted(set(pts))
        path = os.path.join(out_dir, f"{regime}_{method}.csv")
        header = ["c" if method == "cw" else "epsilon", "accuracy"]
        atomic_write(path, _csv_text(header, [list(p) for p in pts], stamp).encode())
        written.append(path)
    return written


def project_features(net: DiffNet, x, labels=None, adversarial=None, out: Optional[str] = None) -> np.ndarray:
    """Principal-component projection of penultimate features to two dimensions.

    Each axis is signed so its largest-magnitude loading is positive.  With
    ``out`` a CSV ``x,y,true,pred,adversarial`` is written.
    """
    x = np.asarray(x)
    if len(x) < 2:
        raise InputError(f"need at least 2 samples to project, got {len(x)}")
    logits, Z = features(net, x)
    coords = pca_2d(Z)
    if out is not None:
        pred = logits.argmax(axis=1)
        true = np.full(len(x), -1) if labels is None else np.asarray(labels)
        flag = np.zeros(len(x), bool) if adversarial is None else np.asarray(adversarial, bool)
        rows = [[f"{a:.8f}", f"{b:.8f}", int(t), int(p), int(f)] for (a, b), t, p, f in zip(coords, true, pred, flag)]
        atomic_write(out, _csv_text(["x", "y", "true", "pred", "adversarial"], rows, "").encode())
    return coords


def pca_2d(Z: np.ndarray) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    centred = Z - Z.mean(axis=0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    axes = vt[:2]
    signs = np.sign(axes[np.arange(len(axes)), np.abs(axes).argmax(axis=1)])
    axes = axes * signs[:, None]
    coords = centred @ axes.T
    if coords.shape[1] < 2:
        coords = np.pad(coords, ((0, 0), (0, 2 - coords.shape[1])))
    return coords
