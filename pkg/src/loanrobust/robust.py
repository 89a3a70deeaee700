"""Robust training by multiplicative weights over perturbation objectives.

The adversary keeps a distribution over a finite list of attacks.  Each
round it reweights attacks by the exponentiated cumulative loss of the
models trained so far; the learner answers with a network adversarially
trained against that mixture (the "oracle").  The output hypothesis is the
uniform ensemble of all round models.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .attacks import MSA_KINDS, AttackConfig, MsaRanking, msa_rank, perturb, run_attack
from .nn import DivergenceError, MlpModel, TrainConfig, cross_entropy, train


class OracleError(RuntimeError):
    def __init__(self, iteration: int, cause: Exception):
        super().__init__(f"oracle failed at iteration {iteration}: {cause}")
        self.iteration = iteration
        self.cause = cause


def derive_seed(*parts: int) -> int:
    """Deterministic child seed for a tuple of integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


class ObjectiveSet(Sequence):
    """Ordered attack objectives; the clean objective "None" appears once."""

    def __init__(self, objectives: Sequence[AttackConfig]):
        objectives = list(objectives)
        if len(objectives) < 2:
            raise ValueError("at least two objectives are required")
        names = [o.name for o in objectives]
        if names.count("None") != 1:
            raise ValueError('the objective "None" must appear exactly once')
        if len(set(names)) != len(names):
            raise ValueError("objective kinds must be distinct")
        self.objectives = objectives

    def __getitem__(self, i):
        return self.objectives[i]

    def __len__(self):
        return len(self.objectives)

    @property
    def m(self) -> int:
        return len(self.objectives)

    @property
    def names(self) -> list[str]:
        return [o.name for o in self.objectives]

    @classmethod
    def standard(cls, epsilon=0.3, msa_percent=0.04, pgd_steps=10, jsma_max_features=5,
                 jsma_epsilon=None) -> "ObjectiveSet":
        """None, FGSM, PGD, JSMA, MSA1, MSA2.  JSMA shares ``epsilon``
        unless ``jsma_epsilon`` is given."""
        return cls([
            AttackConfig("None"),
            AttackConfig("FGSM", epsilon=epsilon),
            AttackConfig("PGD", epsilon=epsilon, pgd_steps=pgd_steps),
            AttackConfig("JSMA", epsilon=epsilon if jsma_epsilon is None else jsma_epsilon,
                         jsma_max_features=jsma_max_features),
            AttackConfig("MSA1", msa_percent=msa_percent),
            AttackConfig("MSA2", msa_percent=msa_percent),
        ])


class EnsembleHypothesis:
    """Uniform mixture of trained networks; predicts from the mean of the
    members' class probabilities."""

    def __init__(self, models: Sequence[MlpModel]):
        if not models:
            raise ValueError("ensemble needs at least one model")
        self.models = list(models)

    def __len__(self):
        return len(self.models)

    @property
    def n_classes(self) -> int:
        return self.models[0].n_classes

    @property
    def input_dim(self) -> int:
        return self.models[0].input_dim

    def predict_proba(self, x) -> np.ndarray:
        return np.mean([m.forward(x) for m in self.models], axis=0)

    forward = predict_proba

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.predict_proba(x), axis=1)

    def loss_input_grad(self, x, y) -> np.ndarray:
        """Per-sample gradient of -log(mean_t p_t[y]) w.r.t. the input."""
        y = np.asarray(y, dtype=np.int64)
        rows = np.arange(len(y))
        num = 0.0
        pbar = 0.0
        for m in self.models:
            p_y = m.forward(x)[rows, y]
            # d p_y / dx = -p_y * d CE / dx
            num = num + p_y[:, None] * m.loss_input_grad(x, y)
            pbar = pbar + p_y
        pbar = np.maximum(pbar, np.finfo(np.float64).tiny)
        return num / pbar[:, None]

    def prob_jacobian(self, x) -> np.ndarray:
        return np.mean([m.prob_jacobian(x) for m in self.models], axis=0)

    def save(self, directory, extra: dict | None = None) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = []
        for t, m in enumerate(self.models, start=1):
            name = f"model_{t:03d}.json"
            m.save(directory / name)
            files.append(name)
        manifest = {"format": "loanrobust-ensemble", "version": 1, "mixture": "uniform", "models": files}
        if extra:
            manifest.update(extra)
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "EnsembleHypothesis":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
        return cls([MlpModel.load(directory / f) for f in manifest["models"]])


# ---------------------------------------------------------------------------
# objectives and losses

def objective_metrics(h, objective: AttackConfig, eval_ds, ranking: MsaRanking | None = None) -> tuple[float, float]:
    """Mean cross-entropy and accuracy of ``h`` on ``eval_ds`` perturbed by
    ``objective`` against ``h`` itself."""
    if len(eval_ds) == 0:
        raise ValueError("empty evaluation set")
    batch = run_attack(h, eval_ds, objective, ranking)
    p = h.predict_proba(batch.x_adv)
    return float(cross_entropy(p, eval_ds.y).mean()), float(np.mean(np.argmax(p, axis=1) == eval_ds.y))


def objective_loss(h, objective: AttackConfig, eval_ds) -> float:
    return objective_metrics(h, objective, eval_ds)[0]


def all_objective_metrics(h, objectives, eval_ds) -> tuple[np.ndarray, np.ndarray]:
    res = [objective_metrics(h, o, eval_ds) for o in objectives]
    return np.array([r[0] for r in res]), np.array([r[1] for r in res])


def bottleneck(h, objectives, eval_ds) -> tuple[float, float]:
    """Worst-case loss and worst-case accuracy over the objectives."""
    if len(objectives) == 0:
        raise ValueError("no objectives")
    losses, accs = all_objective_metrics(h, objectives, eval_ds)
    return float(losses.max()), float(accs.min())


# ---------------------------------------------------------------------------
# the oracle

@dataclass(frozen=True)
class OracleRun:
    model: MlpModel
    counts: np.ndarray  # batches trained under each objective


def _sample_ranking_rows(n, size, seed):
    if n <= size:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, size=size, replace=False))


def oracle_train(w, train_ds, oracle_cfg: TrainConfig, objectives, reference: MlpModel | None = None,
                 msa_rank_size: int = 1000) -> OracleRun:
    """Adversarial training against the objective mixture ``w``.

    Every minibatch draws one objective from ``w`` and is perturbed by it
    against the current parameters.  MSA feature rankings are refreshed
    once per epoch on a fixed subsample of the training set.

    If ``reference`` is given, adversarial examples are instead generated
    once against that fixed model (the static-dataset variant).
    """
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (len(objectives),) or np.any(w < -1e-12) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("w must be a distribution over the objectives")
    w = np.clip(w, 0.0, None)
    w = w / w.sum()
    d = train_ds.n_continuous
    stats = train_ds.stats
    obj_rng = np.random.default_rng(derive_seed(oracle_cfg.seed, 1))
    counts = np.zeros(len(objectives), dtype=np.int64)
    batches_per_epoch = math.ceil(len(train_ds) / oracle_cfg.batch_size)
    rank_rows = _sample_ranking_rows(len(train_ds), msa_rank_size, derive_seed(oracle_cfg.seed, 2))
    rank_subset = train_ds.subset(rank_rows)
    needs_rank = any(o.kind in MSA_KINDS and w[i] > 0 for i, o in enumerate(objectives))
    state = {"step": 0, "ranking": {}}

    static = None
    if reference is not None:
        static = []
        for o in objectives:
            rk = msa_rank(reference, train_ds, o.msa_percent) if o.kind in MSA_KINDS and o.msa_percent > 0 else None
            static.append(run_attack(reference, train_ds, o, rk).x_adv)

    def hook(model, xb, yb, idx):
        i = int(obj_rng.choice(len(objectives), p=w))
        counts[i] += 1
        step = state["step"]
        state["step"] += 1
        o = objectives[i]
        if static is not None:
            return static[i][idx]
        if o.kind == "None":
            return xb
        ranking = None
        if o.kind in MSA_KINDS:
            if o.msa_percent == 0:
                return xb
            if needs_rank and step % batches_per_epoch == 0:
                state["ranking"] = {}
            key = o.msa_percent
            if key not in state["ranking"]:
                state["ranking"][key] = msa_rank(model, rank_subset, o.msa_percent)
            ranking = state["ranking"][key]
        return perturb(model, xb, yb, o, d, raw=train_ds.raw_continuous[idx], stats=stats, ranking=ranking)

    init = MlpModel.init(train_ds.x.shape[1], train_ds.schema.n_classes, seed=oracle_cfg.seed)
    model = train(init, train_ds, oracle_cfg, batch_hook=hook)
    return OracleRun(model, counts)


def bayesian_oracle(w, train_ds, oracle_cfg: TrainConfig, objectives, **kwargs) -> MlpModel:
    """Approximate minimizer of the w-weighted objective loss.  Assumed,
    not verified, to be within a constant factor of optimal."""
    return oracle_train(w, train_ds, oracle_cfg, objectives, **kwargs).model


# ---------------------------------------------------------------------------
# multiplicative weights

def default_eta(m: int, T: int) -> float:
    return math.sqrt(math.log(m) / (2 * T))


def mwu_weights(cum_losses, eta: float) -> np.ndarray:
    """Softmax of eta * cumulative losses, shifted by the max for stability."""
    z = eta * np.asarray(cum_losses, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass(frozen=True)
class MwuConfig:
    T: int = 10
    eta: float | None = None  # None: sqrt(log(m) / 2T)
    oracle_cfg: TrainConfig = field(default_factory=TrainConfig)
    loss_cap: float = 4.0
    static_reference: bool = False
    # the oracle is assumed to be an alpha-approximate minimizer; alpha is never measured
    alpha_note: str = "assumed, unmeasured"

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.eta is not None and not self.eta > 0:
            raise ValueError("eta must be > 0")
        if not self.loss_cap > 0:
            raise ValueError("loss_cap must be > 0")

    def resolved_eta(self, m: int) -> float:
        return default_eta(m, self.T) if self.eta is None else self.eta

    def to_dict(self) -> dict:
        return {"T": self.T, "eta": self.eta, "oracle_cfg": self.oracle_cfg.to_dict(), "loss_cap": self.loss_cap,
                "static_reference": self.static_reference, "alpha_note": self.alpha_note}


@dataclass
class IterationRecord:
    t: int
    weights: np.ndarray
    losses: np.ndarray  # L_i(h_t) on the evaluation set
    accuracies: np.ndarray
    capped_losses: np.ndarray  # what enters the weight rule
    ensemble_losses: np.ndarray  # L_i of the running ensemble h_1..h_t
    ensemble_accuracies: np.ndarray
    bottleneck_loss: float
    bottleneck_accuracy: float
    batch_counts: np.ndarray


@dataclass
class Trajectory:
    objective_names: list[str]
    eta: float
    loss_cap: float
    records: list[IterationRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i) -> IterationRecord:
        return self.records[i]

    @property
    def bottleneck_losses(self) -> np.ndarray:
        return np.array([r.bottleneck_loss for r in self.records])

    @property
    def bottleneck_accuracies(self) -> np.ndarray:
        return np.array([r.bottleneck_accuracy for r in self.records])

    def header(self) -> list[str]:
        n = self.objective_names
        return (["iteration"] + [f"weight_{o}" for o in n] + [f"loss_{o}" for o in n]
                + ["bottleneck_loss", "bottleneck_accuracy"])

    def rows(self) -> list[list]:
        out = []
        for r in self.records:
            out.append([r.t, *map(float, r.weights), *map(float, r.losses), r.bottleneck_loss, r.bottleneck_accuracy])
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(self.header())
            for row in self.rows():
                w.writerow([row[0], *[repr(v) for v in row[1:]]])


def _robust_loop(objectives, cfg: MwuConfig, train_ds, eval_ds, update: bool, track_ensemble: bool = True):
    objectives = objectives if isinstance(objectives, ObjectiveSet) else ObjectiveSet(objectives)
    m = objectives.m
    eta = cfg.resolved_eta(m)
    traj = Trajectory(objectives.names, eta, cfg.loss_cap)
    reference = None
    if cfg.static_reference:
        init = MlpModel.init(train_ds.x.shape[1], train_ds.schema.n_classes, seed=cfg.oracle_cfg.seed)
        reference = train(init, train_ds, cfg.oracle_cfg)
    cum = np.zeros(m)
    models: list[MlpModel] = []
    for t in range(1, cfg.T + 1):
        w = mwu_weights(cum, eta) if update else np.full(m, 1.0 / m)
        oracle_cfg = replace(cfg.oracle_cfg, seed=derive_seed(cfg.oracle_cfg.seed, t))
        try:
            run = oracle_train(w, train_ds, oracle_cfg, objectives, reference=reference)
        except (DivergenceError, FloatingPointError, ValueError) as e:
            raise OracleError(t, e) from e
        models.append(run.model)
        losses, accs = all_objective_metrics(run.model, objectives, eval_ds)
        capped = np.minimum(losses, cfg.loss_cap)
        cum = cum + capped
        if t == 1:
            ens_l, ens_a = losses, accs
        elif track_ensemble or t == cfg.T:
            ens_l, ens_a = all_objective_metrics(EnsembleHypothesis(models), objectives, eval_ds)
        else:
            ens_l = ens_a = np.full(m, np.nan)
        traj.records.append(IterationRecord(
            t, w, losses, accs, capped, ens_l, ens_a, float(np.max(ens_l)), float(np.min(ens_a)), run.counts))
    return EnsembleHypothesis(models), traj


def mwu_robust_train(objectives, cfg: MwuConfig, train_ds, eval_ds, track_ensemble: bool = True):
    """Run the multiplicative-weights robust optimization loop.

    Returns the uniform ensemble over the T oracle models and the
    per-iteration trajectory (weights, per-objective losses of ``h_t``,
    and bottleneck loss / accuracy of the running ensemble).
    """
    return _robust_loop(objectives, cfg, train_ds, eval_ds, update=True, track_ensemble=track_ensemble)


def uniform_baseline(objectives, cfg: MwuConfig, train_ds, eval_ds, track_ensemble: bool = True):
    """Same loop with the objective distribution frozen at uniform."""
    return _robust_loop(objectives, cfg, train_ds, eval_ds, update=False, track_ensemble=track_ensemble)


# ---------------------------------------------------------------------------
# payoff matrix

@dataclass(frozen=True, eq=False)
class PayoffMatrix:
    """Row i: model trained on objective i alone.  Column j: evaluated
    under objective j."""

    labels: list[str]
    loss: np.ndarray
    accuracy: np.ndarray

    def _write(self, path, values):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["trained_on"] + list(self.labels))
            for lab, row in zip(self.labels, values):
                w.writerow([lab, *[repr(float(v)) for v in row]])

    def to_csv(self, loss_path, accuracy_path) -> None:
        self._write(loss_path, self.loss)
        self._write(accuracy_path, self.accuracy)


def payoff_matrix(objectives, train_ds, eval_ds, oracle_cfg: TrainConfig, threads: int = 1) -> PayoffMatrix:
    objectives = objectives if isinstance(objectives, ObjectiveSet) else ObjectiveSet(objectives)
    m = objectives.m

    def row(i):
        w = np.zeros(m)
        w[i] = 1.0
        try:
            model = bayesian_oracle(w, train_ds, oracle_cfg, objectives)
        except (DivergenceError, FloatingPointError) as e:
            raise OracleError(i, RuntimeError(f"training on objective {objectives.names[i]!r} diverged: {e}")) from e
        return all_objective_metrics(model, objectives, eval_ds)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(row, range(m)))
    else:
        rows = [row(i) for i in range(m)]
    return PayoffMatrix(objectives.names, np.array([r[0] for r in rows]), np.array([r[1] for r in rows]))


# ---------------------------------------------------------------------------
# exact matrix games

@dataclass(frozen=True, eq=False)
class GameResult:
    strategy: np.ndarray  # empirical frequency of each column (hypothesis)
    value: float  # worst-row loss of that mixture
    weights: np.ndarray  # adversary distribution at each round, shape (T, m)


def mwu_matrix_game(game, T: int, eta: float | None = None) -> GameResult:
    """The same multiplicative-weights loop on an explicit loss matrix.

    Rows are objectives (the adversary's choices), columns are hypotheses.
    The oracle is an exact best response: the column of least
    w-weighted loss, ties to the lowest index.
    """
    game = np.asarray(game, dtype=np.float64)
    if game.ndim != 2 or not np.all(np.isfinite(game)):
        raise ValueError("game must be a finite 2-d matrix")
    if T < 1:
        raise ValueError("T must be >= 1")
    m, n = game.shape
    eta = default_eta(m, T) if eta is None else eta
    cum = np.zeros(m)
    counts = np.zeros(n)
    weights = np.empty((T, m))
    for t in range(T):
        w = mwu_weights(cum, eta)
        weights[t] = w
        j = int(np.argmin(w @ game))
        counts[j] += 1
        cum += game[:, j]
    q = counts / T
    return GameResult(q, float(np.max(game @ q)), weights)
