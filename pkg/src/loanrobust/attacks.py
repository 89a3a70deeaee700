"""Perturbation attacks on a frozen classifier.

Gradient attacks (FGSM, PGD, JSMA) work in standardized space with budget
``epsilon`` in standard-deviation units.  MSA works in raw space with a
relative change ``msa_percent``.  Only the continuous block (the first
``schema.n_continuous`` columns) is ever touched.

Any object exposing ``predict_proba(x)``, ``loss_input_grad(x, y)`` and
``prob_jacobian(x)`` can be attacked, which covers both single networks
and ensembles.
"""
from __future__ import annotations

import csv
import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .nn import cross_entropy

KINDS = ("None", "FGSM", "PGD", "JSMA", "MSA1", "MSA2")
GRADIENT_KINDS = ("FGSM", "PGD", "JSMA")
MSA_KINDS = ("MSA1", "MSA2")


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "None"
    epsilon: float = 0.0
    pgd_steps: int = 10
    jsma_max_features: int = 5
    jsma_target: int | None = None  # None: adjacent better grade, max(y - 1, 0)
    msa_percent: float = 0.0
    seed: int = 0

    def __post_init__(self):
        kind = _canonical_kind(self.kind)
        object.__setattr__(self, "kind", kind)
        if self.epsilon < 0 or self.msa_percent < 0:
            raise ValueError("epsilon and msa_percent must be non-negative")
        if self.pgd_steps < 1 or self.jsma_max_features < 1:
            raise ValueError("pgd_steps and jsma_max_features must be >= 1")

    @property
    def name(self) -> str:
        return self.kind

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "AttackConfig":
        return cls.from_dict(json.loads(s))


def _canonical_kind(kind: str) -> str:
    table = {k.lower(): k for k in KINDS}
    table.update({"1-msa": "MSA1", "2-msa": "MSA2", "msa-1": "MSA1", "msa-2": "MSA2", "none": "None"})
    try:
        return table[str(kind).lower()]
    except KeyError:
        raise ValueError(f"unknown attack kind {kind!r}; expected one of {KINDS}") from None


@dataclass(frozen=True, eq=False)
class AdversarialBatch:
    """Perturbed inputs together with what the attack did to them.

    ``avg_pct_change`` is in percent (4.0 means 4%), measured in raw space
    as the mean of |delta| / |original| over the perturbed features of
    each sample.  Perturbed features whose original value is 0 are left
    out of that mean and counted in ``n_zero_base`` instead.
    """

    x_adv: np.ndarray
    x_orig: np.ndarray
    raw_orig: np.ndarray
    raw_adv: np.ndarray
    y: np.ndarray
    orig_pred: np.ndarray
    adv_pred: np.ndarray
    flipped: np.ndarray
    avg_pct_change: np.ndarray
    n_zero_base: np.ndarray
    attack: AttackConfig
    ids: np.ndarray = field(default=None)

    def __len__(self):
        return self.x_adv.shape[0]

    @property
    def originally_correct(self) -> np.ndarray:
        return self.orig_pred == self.y

    def flip_rate(self) -> float:
        correct = self.originally_correct
        if not correct.any():
            raise ValueError("no originally-correct samples")
        return float(self.flipped[correct].mean())

    def to_csv(self, path, feature_names) -> None:
        deltas = self.raw_adv - self.raw_orig
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["sample_id", "orig_pred", "adv_pred", "flipped", "avg_pct_change",
                        *[f"delta_{n}" for n in feature_names]])
            for i in range(len(self)):
                w.writerow([int(self.ids[i]), int(self.orig_pred[i]), int(self.adv_pred[i]),
                            int(self.flipped[i]), repr(float(self.avg_pct_change[i])),
                            *[repr(float(v)) for v in deltas[i]]])


# ---------------------------------------------------------------------------
# array-level perturbations

def fgsm_perturb(model, x, y, epsilon: float, n_cont: int) -> np.ndarray:
    """One signed-gradient step of size ``epsilon``; sign(0) = 0."""
    x_adv = np.array(x, dtype=np.float64)
    if epsilon == 0:
        return x_adv
    g = model.loss_input_grad(x, y)[:, :n_cont]
    x_adv[:, :n_cont] += epsilon * np.sign(g)
    return x_adv


def pgd_perturb(model, x, y, epsilon: float, steps: int, n_cont: int) -> np.ndarray:
    """``steps`` raw-gradient ascent steps of size ``epsilon``, each followed
    by projection onto the L-inf ball of radius ``epsilon`` around ``x``."""
    x0 = np.asarray(x, dtype=np.float64)
    x_adv = x0.copy()
    if epsilon == 0:
        return x_adv
    lo, hi = x0[:, :n_cont] - epsilon, x0[:, :n_cont] + epsilon
    for _ in range(steps):
        g = model.loss_input_grad(x_adv, y)[:, :n_cont]
        x_adv[:, :n_cont] = np.clip(x_adv[:, :n_cont] + epsilon * g, lo, hi)
    return x_adv


def saliency_from_jacobian(jac: np.ndarray, target) -> np.ndarray:
    """Saliency of each input feature for raising output ``target``.

    ``jac`` has shape (n, n_outputs, n_features).  A feature scores 0 when
    the target derivative is negative or the other outputs' summed
    derivative is positive; otherwise it scores the target derivative
    times the magnitude of that sum.
    """
    jac = np.asarray(jac, dtype=np.float64)
    if jac.ndim == 2:
        jac = jac[None]
    target = np.broadcast_to(np.asarray(target, dtype=np.int64), (jac.shape[0],))
    d_target = jac[np.arange(jac.shape[0]), target, :]
    d_other = jac.sum(axis=1) - d_target
    return np.where((d_target < 0) | (d_other > 0), 0.0, d_target * np.abs(d_other))


def jsma_saliency(model, x, target_class, n_cont: int | None = None) -> np.ndarray:
    """Saliency map over the continuous features of ``x`` (rows) for the
    given target class(es)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n_cont = x.shape[1] if n_cont is None else n_cont
    n_classes = model.predict_proba(x[:1]).shape[1]
    t = np.asarray(target_class)
    if np.any(t < 0) or np.any(t >= n_classes):
        raise ValueError("target class out of range")
    return saliency_from_jacobian(model.prob_jacobian(x)[:, :, :n_cont], t)


def jsma_targets(y, fixed_target: int | None = None) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if fixed_target is not None:
        return np.full_like(y, fixed_target)
    return np.maximum(y - 1, 0)


def jsma_perturb(model, x, targets, epsilon: float, max_features: int, n_cont: int) -> np.ndarray:
    """Greedy single-feature JSMA: raise the most salient not-yet-used
    feature by ``epsilon`` until the prediction hits the target, no feature
    has positive saliency, or ``max_features`` features have been used."""
    x_adv = np.array(x, dtype=np.float64)
    if epsilon == 0:
        return x_adv
    n = x_adv.shape[0]
    targets = np.broadcast_to(np.asarray(targets, dtype=np.int64), (n,))
    used = np.zeros((n, n_cont), dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(max_features):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        xa = x_adv[idx]
        pred = np.argmax(model.predict_proba(xa), axis=1)
        s = saliency_from_jacobian(model.prob_jacobian(xa)[:, :, :n_cont], targets[idx])
        s[used[idx]] = 0.0
        best = np.argmax(s, axis=1)
        go = (pred != targets[idx]) & (s[np.arange(idx.size), best] > 0)
        active[idx[~go]] = False
        rows, cols = idx[go], best[go]
        x_adv[rows, cols] += epsilon
        used[rows, cols] = True
    return x_adv


def _restandardize(raw, stats, n_cont, x):
    out = np.array(x, dtype=np.float64)
    out[:, :n_cont] = stats.transform(raw)
    return out


def msa_perturb(model, x, y, raw, stats, features, percent: float):
    """Change the given raw features by +/- ``percent`` (relative), picking
    the sign pattern per sample.

    Preference order per sample: patterns that change the prediction, then
    among those ones that move toward a better (smaller) grade, then the
    larger loss; remaining ties go to the earliest pattern.

    Returns ``(x_adv, raw_adv)``.
    """
    x = np.asarray(x, dtype=np.float64)
    raw = np.asarray(raw, dtype=np.float64)
    n_cont = raw.shape[1]
    if percent == 0 or len(features) == 0:
        return x.copy(), raw.copy()
    features = list(features)
    orig_pred = np.argmax(model.predict_proba(x), axis=1)
    n = x.shape[0]
    best_key = None
    best_raw = None
    for signs in itertools.product((1.0, -1.0), repeat=len(features)):
        r = raw.copy()
        for f, s in zip(features, signs):
            r[:, f] = raw[:, f] * (1.0 + s * percent)
        xa = _restandardize(r, stats, n_cont, x)
        p = model.predict_proba(xa)
        pred = np.argmax(p, axis=1)
        key = np.stack([pred != orig_pred, pred < orig_pred, cross_entropy(p, y)], axis=1).astype(np.float64)
        if best_key is None:
            best_key, best_raw = key, r
            continue
        better = np.zeros(n, dtype=bool)
        decided = np.zeros(n, dtype=bool)
        for c in range(3):
            gt = ~decided & (key[:, c] > best_key[:, c])
            lt = ~decided & (key[:, c] < best_key[:, c])
            better |= gt
            decided |= gt | lt
        best_key[better] = key[better]
        best_raw[better] = r[better]
    return _restandardize(best_raw, stats, n_cont, x), best_raw


# ---------------------------------------------------------------------------
# MSA feature ranking

@dataclass(frozen=True, eq=False)
class MsaRanking:
    order: np.ndarray  # feature indices, most flip-inducing first
    flip_rates: np.ndarray  # per feature, in original feature order
    names: tuple[str, ...]
    percent: float

    def top(self, k: int) -> list[int]:
        if k > len(self.order):
            raise ValueError(f"need {k} ranked features, only {len(self.order)} available")
        return [int(i) for i in self.order[:k]]

    def rows(self):
        return [(int(i), self.names[i], float(self.flip_rates[i])) for i in self.order]


def msa_rank(model, ds, percent: float) -> MsaRanking:
    """Rank continuous features by how often a +/- ``percent`` raw change to
    that feature alone flips an originally-correct prediction (either
    direction counts).  Ties go to the lower feature index."""
    if not percent > 0:
        raise ValueError("percent must be > 0")
    d = ds.n_continuous
    orig_pred = model.predict(ds.x)
    correct = orig_pred == ds.y
    if not correct.any():
        raise ValueError("no originally-correct samples to rank features on")
    raw = ds.raw_continuous[correct]
    x = ds.x[correct]
    base = orig_pred[correct]
    rates = np.zeros(d)
    for j in range(d):
        flipped = np.zeros(len(base), dtype=bool)
        for s in (1.0, -1.0):
            r = raw.copy()
            r[:, j] = raw[:, j] * (1.0 + s * percent)
            flipped |= model.predict(_restandardize(r, ds.stats, d, x)) != base
        rates[j] = flipped.mean()
    order = np.lexsort((np.arange(d), -rates))
    return MsaRanking(order, rates, tuple(ds.schema.continuous_names), percent)


# ---------------------------------------------------------------------------
# dataset-level entry points

def perturb(model, x, y, cfg: AttackConfig, n_cont: int, raw=None, stats=None, ranking=None) -> np.ndarray:
    """Dispatch on ``cfg.kind`` and return perturbed standardized inputs."""
    kind = cfg.kind
    if kind == "None":
        return np.array(x, dtype=np.float64)
    if kind == "FGSM":
        return fgsm_perturb(model, x, y, cfg.epsilon, n_cont)
    if kind == "PGD":
        return pgd_perturb(model, x, y, cfg.epsilon, cfg.pgd_steps, n_cont)
    if kind == "JSMA":
        return jsma_perturb(model, x, jsma_targets(y, cfg.jsma_target), cfg.epsilon, cfg.jsma_max_features, n_cont)
    if raw is None or stats is None or ranking is None:
        raise ValueError("MSA needs raw values, standardization stats and a feature ranking")
    return msa_perturb(model, x, y, raw, stats, ranking.top(1 if kind == "MSA1" else 2), cfg.msa_percent)[0]


def _pct_change(raw_orig, raw_adv):
    delta = np.abs(raw_adv - raw_orig)
    moved = delta != 0
    base = np.abs(raw_orig)
    usable = moved & (base != 0)
    rel = np.divide(delta, base, out=np.zeros_like(delta), where=usable)
    counts = usable.sum(axis=1)
    avg = np.divide(rel.sum(axis=1), counts, out=np.zeros(len(counts)), where=counts > 0) * 100.0
    return avg, (moved & (base == 0)).sum(axis=1)


def _batch(model, ds, cfg, x_adv, raw_adv=None) -> AdversarialBatch:
    d = ds.n_continuous
    if raw_adv is None:
        raw_adv = ds.raw_continuous + (x_adv[:, :d] - ds.x[:, :d]) * ds.stats.std
    orig_pred = model.predict(ds.x) if hasattr(model, "predict") else np.argmax(model.predict_proba(ds.x), 1)
    adv_pred = model.predict(x_adv)
    flipped = (orig_pred == ds.y) & (adv_pred != orig_pred)
    avg, zero = _pct_change(ds.raw_continuous, raw_adv)
    return AdversarialBatch(x_adv, ds.x, ds.raw_continuous, raw_adv, ds.y, orig_pred, adv_pred,
                            flipped, avg, zero, cfg, ds.ids)


def _require(cfg, kinds):
    if cfg.kind not in kinds:
        raise ValueError(f"attack config kind {cfg.kind!r} is not one of {kinds}")


def _require_standardized(ds):
    if ds.stats is None:
        raise ValueError("attacks need a standardized dataset")


def fgsm(model, batch, cfg: AttackConfig) -> AdversarialBatch:
    _require(cfg, ("FGSM",))
    _require_standardized(batch)
    return _batch(model, batch, cfg, fgsm_perturb(model, batch.x, batch.y, cfg.epsilon, batch.n_continuous))


def pgd(model, batch, cfg: AttackConfig) -> AdversarialBatch:
    _require(cfg, ("PGD",))
    _require_standardized(batch)
    x_adv = pgd_perturb(model, batch.x, batch.y, cfg.epsilon, cfg.pgd_steps, batch.n_continuous)
    return _batch(model, batch, cfg, x_adv)


def jsma(model, batch, cfg: AttackConfig) -> AdversarialBatch:
    _require(cfg, ("JSMA",))
    _require_standardized(batch)
    targets = jsma_targets(batch.y, cfg.jsma_target)
    x_adv = jsma_perturb(model, batch.x, targets, cfg.epsilon, cfg.jsma_max_features, batch.n_continuous)
    return _batch(model, batch, cfg, x_adv)


def msa(model, batch, cfg: AttackConfig, ranked_features) -> AdversarialBatch:
    """``ranked_features`` is an :class:`MsaRanking` or a list of feature
    indices, most salient first."""
    _require(cfg, MSA_KINDS)
    _require_standardized(batch)
    k = 1 if cfg.kind == "MSA1" else 2
    feats = ranked_features.top(k) if isinstance(ranked_features, MsaRanking) else list(ranked_features)
    if len(feats) < k:
        raise ValueError(f"{cfg.kind} needs {k} ranked features, got {len(feats)}")
    x_adv, raw_adv = msa_perturb(model, batch.x, batch.y, batch.raw_continuous, batch.stats, feats[:k],
                                 cfg.msa_percent)
    return _batch(model, batch, cfg, x_adv, raw_adv)


def run_attack(model, batch, cfg: AttackConfig, ranking: MsaRanking | None = None) -> AdversarialBatch:
    """Attack ``batch`` with any kind; MSA ranks features against ``model``
    on ``batch`` when no ranking is supplied."""
    if cfg.kind == "None":
        _require_standardized(batch)
        return _batch(model, batch, cfg, np.array(batch.x))
    if cfg.kind in MSA_KINDS:
        if ranking is None:
            if cfg.msa_percent == 0:
                return _batch(model, batch, cfg, np.array(batch.x), batch.raw_continuous.copy())
            ranking = msa_rank(model, batch, cfg.msa_percent)
        return msa(model, batch, cfg, ranking)
    return {"FGSM": fgsm, "PGD": pgd, "JSMA": jsma}[cfg.kind](model, batch, cfg)


def save_attack_configs(configs, path) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in configs], indent=2), encoding="utf-8")


def load_attack_configs(path) -> list[AttackConfig]:
    return [AttackConfig.from_dict(d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]
