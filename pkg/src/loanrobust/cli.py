"""Command-line pipeline: prepare -> train -> attack / msa-rank -> robust /
payoff -> report.

Every stage reads a JSON run config (``--config``), applies flag
overrides, and writes artifacts under the output directory.

Seed fan-out: the data stage uses the master seed itself, so
``prepare --seed 7`` yields the frozen synthetic fixture.  Every later
stage ``k`` uses ``derive_seed(master, k)`` with the counters in
``STAGES``.

Exit codes: 0 success, 2 usage error or missing input, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import MSA_KINDS, AttackConfig, msa_rank, run_attack
from .dataset import (Dataset, EmptyDatasetError, Schema, SchemaError, SyntheticSpec, SyntheticSpecError,
                      apply_standardize, default_synthetic_spec, fit_standardize, load_csv, split, synthetic_fixture)
from .evaluation import EfficacyCurve, RunArtifacts, efficacy_sweep, report, sample_exhibits
from .nn import DivergenceError, MlpModel, TrainConfig, train
from .robust import (MwuConfig, ObjectiveSet, OracleError, derive_seed, mwu_robust_train, payoff_matrix,
                     uniform_baseline)

ENV_OUT = "LOANROBUST_OUT"
ENV_THREADS = "LOANROBUST_THREADS"
STAGES = {"train": 1, "robust": 2, "payoff": 3}

DEFAULT_CONFIG = {
    "seed": 7,
    "out": "loanrobust-out",
    "threads": 1,
    "data": {"synthetic": "default", "n_train": 5000, "n_test": 1000},
    "train": {"epochs": 30, "batch_size": 64, "learning_rate": 1e-3, "optimizer": "adam"},
    "attacks": [
        {"kind": "FGSM", "grid": [0.0, 0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5]},
        {"kind": "PGD", "grid": [0.0, 0.05, 0.1, 0.15, 0.2, 0.3], "pgd_steps": 10},
        {"kind": "JSMA", "grid": [0.0, 0.5, 1.0, 2.0], "jsma_max_features": 5},
        {"kind": "MSA1", "grid": [0.0, 0.02, 0.04, 0.08, 0.12]},
        {"kind": "MSA2", "grid": [0.0, 0.02, 0.04, 0.08, 0.12]},
    ],
    "objectives": {"epsilon": 0.1, "jsma_epsilon": 2.0, "msa_percent": 0.12, "pgd_steps": 10,
                   "jsma_max_features": 5},
    "mwu": {"T": 10, "eta": None, "loss_cap": 4.0, "static_reference": False, "epochs": 30},
    "exhibits": {"attack": {"kind": "MSA2", "msa_percent": 0.04}, "n": 10, "filter": None},
}


class UsageError(Exception):
    """Bad or missing input; exit code 2."""


# ---------------------------------------------------------------------------
# config

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "data":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path) -> dict:
    """Read a run config; a report manifest is accepted too."""
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        d = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {p} is not valid JSON: {e}") from e
    if "schema_version" in d and "config" in d:
        d = d["config"]
    return _merge(DEFAULT_CONFIG, d)


def validate_config(cfg: dict) -> dict:
    data = cfg["data"]
    if ("synthetic" in data) == ("csv" in data):
        raise UsageError("data source must be exactly one of 'synthetic' or 'csv' (+ 'schema')")
    if "csv" in data and "schema" not in data:
        raise UsageError("a csv data source needs a 'schema' path")
    if int(cfg["threads"]) < 1:
        raise UsageError("threads must be >= 1")
    return cfg


def resolve_config(args) -> dict:
    cfg = load_config(args.config) if args.config else copy.deepcopy(DEFAULT_CONFIG)
    if os.environ.get(ENV_OUT):
        cfg["out"] = os.environ[ENV_OUT]
    if os.environ.get(ENV_THREADS):
        cfg["threads"] = int(os.environ[ENV_THREADS])
    if args.out is not None:
        cfg["out"] = args.out
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.threads is not None:
        cfg["threads"] = args.threads
    return validate_config(cfg)


def stage_seed(cfg: dict, stage: str) -> int:
    return derive_seed(int(cfg["seed"]), STAGES[stage])


def seeds(cfg: dict) -> dict:
    return {"master": int(cfg["seed"]), "data": int(cfg["seed"]), **{k: stage_seed(cfg, k) for k in STAGES}}


def train_config(cfg: dict, stage: str, epochs=None) -> TrainConfig:
    t = dict(cfg["train"])
    t["seed"] = stage_seed(cfg, stage)
    if epochs is not None:
        t["epochs"] = int(epochs)
    return TrainConfig(**t)


def objective_set(cfg: dict) -> ObjectiveSet:
    return ObjectiveSet.standard(**cfg["objectives"])


def mwu_config(cfg: dict) -> MwuConfig:
    m = dict(cfg["mwu"])
    return MwuConfig(T=int(m["T"]), eta=m.get("eta"), loss_cap=float(m["loss_cap"]),
                     static_reference=bool(m.get("static_reference", False)),
                     oracle_cfg=train_config(cfg, "robust", m.get("epochs")))


# ---------------------------------------------------------------------------
# artifact paths

def _out(cfg) -> Path:
    return Path(cfg["out"])


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True), encoding="utf-8")


def _stage_manifest(cfg, stage, extra=None) -> dict:
    return {"loanrobust_version": __version__, "stage": stage, "config": cfg, "seeds": seeds(cfg), **(extra or {})}


def _require_file(path: Path, hint: str) -> Path:
    if not path.is_file():
        raise UsageError(f"missing artifact {path} (run '{hint}' first)")
    return path


def load_data(cfg) -> tuple[Dataset, Dataset]:
    d = _out(cfg) / "data"
    train_ds = Dataset.load(_require_file(d / "train.json", "prepare"))
    test_ds = Dataset.load(_require_file(d / "test.json", "prepare"))
    return train_ds, test_ds


def load_model(cfg) -> MlpModel:
    return MlpModel.load(_require_file(_out(cfg) / "model" / "model.json", "train"))


# ---------------------------------------------------------------------------
# stages

def cmd_prepare(cfg: dict) -> Path:
    data = cfg["data"]
    seed = int(cfg["seed"])
    if "synthetic" in data:
        src = data["synthetic"]
        if src == "default":
            spec = default_synthetic_spec()
        else:
            if not Path(src).is_file():
                raise UsageError(f"synthetic spec file not found: {src}")
            spec = SyntheticSpec.load(src)
        train_ds, test_ds = synthetic_fixture(seed, int(data.get("n_train", 5000)),
                                              int(data.get("n_test", 1000)), spec=spec)
        stats = train_ds.stats
        n_dropped = 0
    else:
        schema_path, csv_path = Path(data["schema"]), Path(data["csv"])
        if not schema_path.is_file():
            raise UsageError(f"schema file not found: {schema_path}")
        if not csv_path.is_file():
            raise UsageError(f"csv file not found: {csv_path}")
        full, n_dropped = load_csv(csv_path, Schema.load(schema_path))
        tr, te = split(full, float(data.get("test_fraction", 0.2)), seed)
        train_ds, stats = fit_standardize(tr)
        test_ds = apply_standardize(te, stats)
    d = _out(cfg) / "data"
    d.mkdir(parents=True, exist_ok=True)
    train_ds.save(d / "train.json")
    test_ds.save(d / "test.json")
    _write_json(d / "stats.json", stats.to_dict())
    _write_json(d / "manifest.json", _stage_manifest(cfg, "prepare", {
        "n_train": len(train_ds), "n_test": len(test_ds), "n_dropped": n_dropped,
        "train_fingerprint": train_ds.fingerprint(), "test_fingerprint": test_ds.fingerprint()}))
    return d


def cmd_train(cfg: dict) -> Path:
    train_ds, test_ds = load_data(cfg)
    tcfg = train_config(cfg, "train")
    model = MlpModel.init(train_ds.x.shape[1], train_ds.schema.n_classes, seed=tcfg.seed)
    model = train(model, train_ds, tcfg)
    d = _out(cfg) / "model"
    d.mkdir(parents=True, exist_ok=True)
    model.save(d / "model.json")
    acc = float(np.mean(model.predict(test_ds.x) == test_ds.y))
    _write_json(d / "manifest.json", _stage_manifest(cfg, "train", {"test_accuracy": acc}))
    return d


def _attack_entries(cfg: dict) -> list[tuple[AttackConfig, list[float]]]:
    out = []
    for e in cfg["attacks"]:
        e = dict(e)
        grid = [float(b) for b in e.pop("grid")]
        out.append((AttackConfig(**e), grid))
    return out


def _budget_of(cfg: AttackConfig) -> float:
    return cfg.msa_percent if cfg.kind in MSA_KINDS else cfg.epsilon


def _at_budget(cfg: AttackConfig, b: float) -> AttackConfig:
    return replace(cfg, msa_percent=b) if cfg.kind in MSA_KINDS else replace(cfg, epsilon=b)


def cmd_attack(cfg: dict) -> Path:
    _, test_ds = load_data(cfg)
    model = load_model(cfg)
    root = _out(cfg) / "attacks"
    for base, grid in _attack_entries(cfg):
        curve = efficacy_sweep(model, test_ds, base.kind, grid, base=base)
        d = root / base.kind
        d.mkdir(parents=True, exist_ok=True)
        curve.to_csv(d / "curve.csv")
        batch = run_attack(model, test_ds, _at_budget(base, grid[-1]))
        batch.to_csv(d / "batch.csv", test_ds.schema.continuous_names)
        _write_json(d / "manifest.json", _stage_manifest(cfg, "attack", {"attack": base.to_dict(), "grid": grid}))
    return root


def cmd_msa_rank(cfg: dict, percent: float) -> Path:
    _, test_ds = load_data(cfg)
    model = load_model(cfg)
    ranking = msa_rank(model, test_ds, percent)
    d = _out(cfg) / "msa"
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "rank.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["rank", "feature_index", "feature", "flip_rate", "percent"])
        for r, (i, name, rate) in enumerate(ranking.rows(), start=1):
            w.writerow([r, i, name, repr(rate), repr(float(percent))])
    _write_json(d / "manifest.json", _stage_manifest(cfg, "msa-rank", {"percent": percent}))
    return d


def cmd_robust(cfg: dict, baseline: bool = False) -> Path:
    train_ds, test_ds = load_data(cfg)
    objectives = objective_set(cfg)
    mcfg = mwu_config(cfg)
    run = uniform_baseline if baseline else mwu_robust_train
    ensemble, traj = run(objectives, mcfg, train_ds, test_ds)
    d = _out(cfg) / "robust" / ("baseline" if baseline else "mwu")
    d.mkdir(parents=True, exist_ok=True)
    traj.to_csv(d / "trajectory.csv")
    ensemble.save(d / "ensemble", extra={"objectives": objectives.names, "eta": traj.eta})
    _write_json(d / "manifest.json", _stage_manifest(cfg, "robust", {
        "baseline": baseline, "eta": traj.eta, "objectives": [o.to_dict() for o in objectives],
        "final_bottleneck_loss": float(traj.bottleneck_losses[-1]),
        "final_bottleneck_accuracy": float(traj.bottleneck_accuracies[-1])}))
    return d


def cmd_payoff(cfg: dict) -> Path:
    train_ds, test_ds = load_data(cfg)
    objectives = objective_set(cfg)
    ocfg = train_config(cfg, "payoff", cfg["mwu"].get("epochs"))
    pm = payoff_matrix(objectives, train_ds, test_ds, ocfg, threads=int(cfg["threads"]))
    d = _out(cfg) / "payoff"
    d.mkdir(parents=True, exist_ok=True)
    pm.to_csv(d / "payoff_loss.csv", d / "payoff_accuracy.csv")
    _write_json(d / "manifest.json", _stage_manifest(cfg, "payoff", {"objectives": objectives.names}))
    return d


def _read_curve(path: Path) -> EfficacyCurve:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    return EfficacyCurve(rows[0]["attack"], np.array([float(r["budget"]) for r in rows]),
                         np.array([float(r["flip_rate"]) for r in rows]),
                         np.array([float(r["realized_avg_pct"]) for r in rows]),
                         np.array([int(r["n"]) for r in rows]))


def _read_rows(path: Path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.reader(f))


class _CsvTable:
    """Pass-through for a CSV already on disk; lets ``report`` copy it."""

    def __init__(self, rows):
        self.rows_ = rows

    def to_csv(self, path, *extra):
        with open(path, "w", newline="", encoding="utf-8") as f:
            csv.writer(f).writerows(self.rows_)


class _PayoffCopy:
    def __init__(self, loss_rows, acc_rows):
        self.loss, self.acc = _CsvTable(loss_rows), _CsvTable(acc_rows)

    def to_csv(self, loss_path, acc_path):
        self.loss.to_csv(loss_path)
        self.acc.to_csv(acc_path)


def cmd_report(cfg: dict) -> Path:
    train_ds, test_ds = load_data(cfg)
    model = load_model(cfg)
    out = _out(cfg)
    art = RunArtifacts(config=cfg, seeds=seeds(cfg), dataset_fingerprint=train_ds.fingerprint())
    for base, _ in _attack_entries(cfg):
        art.curves.append(_read_curve(_require_file(out / "attacks" / base.kind / "curve.csv", "attack")))
    for label in ("mwu", "baseline"):
        p = out / "robust" / label / "trajectory.csv"
        if p.is_file():
            art.trajectories[label] = _CsvTable(_read_rows(p))
    pdir = out / "payoff"
    if (pdir / "payoff_loss.csv").is_file():
        art.payoff = _PayoffCopy(_read_rows(pdir / "payoff_loss.csv"),
                                 _read_rows(pdir / "payoff_accuracy.csv"))
    ex = cfg["exhibits"]
    ex_cfg = AttackConfig(**ex["attack"])
    if _budget_of(ex_cfg) > 0:
        art.exhibits = sample_exhibits(model, test_ds, ex_cfg, int(ex["n"]), ex.get("filter"))
        if ex_cfg.kind in MSA_KINDS:
            art.msa_rankings.append(msa_rank(model, test_ds, ex_cfg.msa_percent))
    return report(art, out / "report")


def run_pipeline(cfg: dict, payoff: bool = False, baseline: bool = True) -> Path:
    """prepare -> train -> attack -> robust (MWU, optionally baseline) ->
    [payoff] -> report."""
    cmd_prepare(cfg)
    cmd_train(cfg)
    cmd_attack(cfg)
    cmd_robust(cfg)
    if baseline:
        cmd_robust(cfg, baseline=True)
    if payoff:
        cmd_payoff(cfg)
    return cmd_report(cfg)


# ---------------------------------------------------------------------------
# argument parsing

def _floats(s: str) -> list[float]:
    try:
        return [float(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (a report manifest.json also works)")
    common.add_argument("--out", help=f"output directory (env {ENV_OUT}; default from config)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--threads", type=int, help=f"worker cap (env {ENV_THREADS})")

    p = argparse.ArgumentParser(prog="loanrobust", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", parents=[common], help="synthesize or load data, split and standardize")
    s.add_argument("--synthetic", help="synthetic spec JSON, or 'default'")
    s.add_argument("--csv", help="loan CSV file (needs --schema)")
    s.add_argument("--schema", help="schema JSON for --csv")
    s.add_argument("--n-train", type=int)
    s.add_argument("--n-test", type=int)
    s.add_argument("--test-fraction", type=float, help="csv source only")

    s = sub.add_parser("train", parents=[common], help="train the clean classifier")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)

    s = sub.add_parser("attack", parents=[common], help="efficacy curves for one or all configured attacks")
    s.add_argument("--kind", help="FGSM, PGD, JSMA, MSA1 or MSA2 (default: every configured attack)")
    s.add_argument("--eps", type=float, help="single epsilon budget (standardized units)")
    s.add_argument("--percent", type=float, help="single MSA budget as a fraction, 0.04 = 4%%")
    s.add_argument("--grid", type=_floats, help="comma-separated budget grid")
    s.add_argument("--pgd-steps", type=int)
    s.add_argument("--jsma-max-features", type=int)

    s = sub.add_parser("msa-rank", parents=[common], help="rank features by single-feature flip rate")
    s.add_argument("--percent", type=float, default=0.04, help="raw change as a fraction (default 0.04)")

    s = sub.add_parser("robust", parents=[common], help="multiplicative-weights robust training")
    s.add_argument("--T", type=int, dest="T", help="iterations")
    s.add_argument("--eta", type=float, help="learning rate (default sqrt(ln m / 2T))")
    s.add_argument("--epochs", type=int, help="oracle training epochs")
    s.add_argument("--baseline", action="store_true", help="keep the objective weights uniform")
    s.add_argument("--static-reference", action="store_true",
                   help="attack a fixed pretrained model instead of the model being trained")

    s = sub.add_parser("payoff", parents=[common], help="single-objective training vs every objective")
    s.add_argument("--epochs", type=int, help="training epochs per row")

    s = sub.add_parser("report", parents=[common], help="collect artifacts into a report bundle")
    s.add_argument("--exhibits", type=int, help="number of sample exhibits")
    return p


def _apply_overrides(cfg: dict, args) -> dict:
    c = args.command
    if c == "prepare":
        if args.csv or args.schema:
            cfg["data"] = {"csv": args.csv, "schema": args.schema,
                           "test_fraction": args.test_fraction if args.test_fraction is not None else 0.2}
            if args.csv is None or args.schema is None:
                raise UsageError("--csv and --schema must be given together")
        elif args.synthetic:
            cfg["data"] = {"synthetic": args.synthetic, "n_train": cfg["data"].get("n_train", 5000),
                           "n_test": cfg["data"].get("n_test", 1000)}
        if "synthetic" in cfg["data"]:
            if args.n_train is not None:
                cfg["data"]["n_train"] = args.n_train
            if args.n_test is not None:
                cfg["data"]["n_test"] = args.n_test
    elif c == "train":
        for flag, key in (("epochs", "epochs"), ("lr", "learning_rate"), ("batch_size", "batch_size")):
            if getattr(args, flag) is not None:
                cfg["train"][key] = getattr(args, flag)
    elif c == "attack":
        if args.kind is not None:
            kind = AttackConfig(args.kind).kind
            entry = next((dict(e) for e in cfg["attacks"] if AttackConfig(e["kind"]).kind == kind), {"kind": kind})
            entry["kind"] = kind
            if args.grid is not None:
                entry["grid"] = args.grid
            elif args.eps is not None or args.percent is not None:
                entry["grid"] = [args.percent if kind in MSA_KINDS and args.percent is not None else args.eps]
            if "grid" not in entry or entry["grid"][0] is None:
                raise UsageError(f"no budget for {kind}: pass --grid, --eps or --percent")
            if args.pgd_steps is not None:
                entry["pgd_steps"] = args.pgd_steps
            if args.jsma_max_features is not None:
                entry["jsma_max_features"] = args.jsma_max_features
            cfg["attacks"] = [entry]
        elif args.grid is not None or args.eps is not None or args.percent is not None:
            raise UsageError("--grid/--eps/--percent need --kind")
    elif c == "robust":
        if args.T is not None:
            cfg["mwu"]["T"] = args.T
        if args.eta is not None:
            cfg["mwu"]["eta"] = args.eta
        if args.epochs is not None:
            cfg["mwu"]["epochs"] = args.epochs
        if args.static_reference:
            cfg["mwu"]["static_reference"] = True
    elif c == "payoff":
        if args.epochs is not None:
            cfg["mwu"]["epochs"] = args.epochs
    elif c == "report":
        if args.exhibits is not None:
            cfg["exhibits"]["n"] = args.exhibits
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(resolve_config(args), args)
        validate_config(cfg)
        c = args.command
        if c == "prepare":
            path = cmd_prepare(cfg)
        elif c == "train":
            path = cmd_train(cfg)
        elif c == "attack":
            path = cmd_attack(cfg)
        elif c == "msa-rank":
            path = cmd_msa_rank(cfg, args.percent)
        elif c == "robust":
            path = cmd_robust(cfg, baseline=args.baseline)
        elif c == "payoff":
            path = cmd_payoff(cfg)
        else:
            path = cmd_report(cfg)
    except (UsageError, SchemaError, SyntheticSpecError, EmptyDatasetError, FileNotFoundError) as e:
        print(f"loanrobust {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (OracleError, DivergenceError, FloatingPointError) as e:
        print(f"loanrobust {args.command}: numerical failure: {e}", file=sys.stderr)
        return 3
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
