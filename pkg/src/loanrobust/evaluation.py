"""Evaluation artifacts: efficacy curves, per-sample exhibits and report
bundles of plot-ready CSV/JSON files."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import MSA_KINDS, AttackConfig, msa_rank, run_attack

REPORT_SCHEMA_VERSION = "1.0.0"
CURVE_COLUMNS = ["attack", "budget", "realized_avg_pct", "flip_rate", "n"]
UNITS = {
    "budget": "epsilon in standard-deviation units (FGSM, PGD, JSMA); relative raw change, 0.04 = 4% (MSA1, MSA2)",
    "realized_avg_pct": "percent, raw feature space, mean over perturbed features then over attacked samples",
    "flip_rate": "fraction of originally-correct samples whose prediction changed",
}


@dataclass
class EfficacyCurve:
    attack: str
    budgets: np.ndarray
    flip_rates: np.ndarray
    realized_avg_pct: np.ndarray
    n: np.ndarray

    def rows(self):
        return [[self.attack, float(b), float(p), float(f), int(k)]
                for b, p, f, k in zip(self.budgets, self.realized_avg_pct, self.flip_rates, self.n)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(CURVE_COLUMNS)
            for a, b, p, fr, k in self.rows():
                w.writerow([a, repr(b), repr(p), repr(fr), k])


def _config_at(kind: str, budget: float, base: AttackConfig | None) -> AttackConfig:
    base = base or AttackConfig(kind)
    if kind in MSA_KINDS:
        return AttackConfig(kind, msa_percent=budget, seed=base.seed)
    return AttackConfig(kind, epsilon=budget, pgd_steps=base.pgd_steps, jsma_max_features=base.jsma_max_features,
                        jsma_target=base.jsma_target, seed=base.seed)


def efficacy_sweep(model, test_ds, attack_kind: str, budget_grid, base: AttackConfig | None = None) -> EfficacyCurve:
    """Flip rate and realized raw-space change of one attack over a budget
    grid, on the originally-correct test samples.

    For MSA the feature ranking is recomputed at every budget.
    """
    kind = AttackConfig(attack_kind).kind
    grid = np.asarray(budget_grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("budget grid must be a non-empty 1-d sequence")
    if grid[0] < 0 or np.any(np.diff(grid) <= 0):
        raise ValueError("budget grid must start at >= 0 and be strictly increasing")
    correct = model.predict(test_ds.x) == test_ds.y
    if not correct.any():
        raise ValueError("model has no originally-correct samples to attack")
    ds = test_ds.subset(np.flatnonzero(correct))
    flips, pct = [], []
    for b in grid:
        cfg = _config_at(kind, float(b), base)
        ranking = msa_rank(model, ds, b) if kind in MSA_KINDS and b > 0 else None
        batch = run_attack(model, ds, cfg, ranking)
        flips.append(float(batch.flipped.mean()))
        pct.append(float(batch.avg_pct_change.mean()))
    return EfficacyCurve(kind, grid, np.array(flips), np.array(pct), np.full(grid.size, len(ds)))


@dataclass
class SampleExhibit:
    sample_id: int
    original_grade: str
    adversarial_grade: str
    # (feature, raw before, raw after, percent change); percent is nan when before == 0
    changes: list[tuple[str, float, float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "original_grade": self.original_grade,
            "adversarial_grade": self.adversarial_grade,
            "changes": [{"feature": f, "before": b, "after": a, "pct_change": None if math.isnan(p) else p}
                        for f, b, a, p in self.changes],
        }


def _grade_index(g, alphabet):
    return alphabet.index(g) if isinstance(g, str) else int(g)


def sample_exhibits(model, test_ds, attack: AttackConfig, n: int, grade_filter=None, ranking=None) -> list[SampleExhibit]:
    """Up to ``n`` flipped samples, optionally restricted to a
    ``(from_grade, to_grade)`` pair (letters or indices)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    alphabet = test_ds.schema.label_alphabet
    batch = run_attack(model, test_ds, attack, ranking)
    keep = batch.flipped.copy()
    if grade_filter is not None:
        src, dst = (_grade_index(g, alphabet) for g in grade_filter)
        keep &= (batch.orig_pred == src) & (batch.adv_pred == dst)
    names = test_ds.schema.continuous_names
    out = []
    for i in np.flatnonzero(keep)[:n]:
        before, after = batch.raw_orig[i], batch.raw_adv[i]
        changes = []
        for j in np.flatnonzero(after != before):
            b, a = float(before[j]), float(after[j])
            changes.append((names[j], b, a, (a - b) / abs(b) * 100.0 if b != 0 else math.nan))
        out.append(SampleExhibit(int(batch.ids[i]), alphabet[batch.orig_pred[i]], alphabet[batch.adv_pred[i]], changes))
    return out


# ---------------------------------------------------------------------------
# report bundles

@dataclass
class RunArtifacts:
    config: dict
    seeds: dict
    dataset_fingerprint: str
    curves: list[EfficacyCurve] = field(default_factory=list)
    payoff: object | None = None  # robust.PayoffMatrix
    trajectories: dict = field(default_factory=dict)  # name -> robust.Trajectory
    exhibits: list[SampleExhibit] = field(default_factory=list)
    msa_rankings: list = field(default_factory=list)  # attacks.MsaRanking


def _write_ranking(path, ranking):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["rank", "feature_index", "feature", "flip_rate", "percent"])
        for r, (i, name, rate) in enumerate(ranking.rows(), start=1):
            w.writerow([r, i, name, repr(rate), repr(float(ranking.percent))])


def report(artifacts: RunArtifacts, out_dir) -> Path:
    """Write every artifact as CSV/JSON plus ``manifest.json`` into
    ``out_dir``.  Output depends only on ``artifacts`` (no timestamps)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for c in artifacts.curves:
        name = f"curve_{c.attack}.csv"
        c.to_csv(out / name)
        files.append(name)
    if artifacts.payoff is not None:
        artifacts.payoff.to_csv(out / "payoff_loss.csv", out / "payoff_accuracy.csv")
        files += ["payoff_loss.csv", "payoff_accuracy.csv"]
    for label, traj in sorted(artifacts.trajectories.items()):
        name = f"trajectory_{label}.csv"
        traj.to_csv(out / name)
        files.append(name)
    for r in artifacts.msa_rankings:
        name = f"msa_rank_{r.percent!r}.csv"
        _write_ranking(out / name, r)
        files.append(name)
    if artifacts.exhibits:
        (out / "exhibits.json").write_text(json.dumps([e.to_dict() for e in artifacts.exhibits], indent=2),
                                           encoding="utf-8")
        files.append("exhibits.json")
    manifest = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "config": artifacts.config,
        "seeds": artifacts.seeds,
        "dataset_fingerprint": artifacts.dataset_fingerprint,
        "units": UNITS,
        "curve_columns": CURVE_COLUMNS,
        "files": sorted(files),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return out
