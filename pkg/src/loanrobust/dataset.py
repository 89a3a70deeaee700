"""Tabular loan data: CSV ingestion, standardization, splitting and a
synthetic generator for desk-scale experiments.

The feature matrix ``x`` of a :class:`Dataset` always has the continuous
columns first, followed by one one-hot block per discrete feature.  Only
the continuous block is ever standardized (and, downstream, perturbed).
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

GRADES = "ABCDEFG"


class SchemaError(ValueError):
    """Input does not match the declared schema."""


class EmptyDatasetError(ValueError):
    pass


class DegenerateFeatureError(ValueError):
    """A continuous column has zero variance on the fit split."""


class SyntheticSpecError(ValueError):
    pass


@dataclass(frozen=True)
class Schema:
    continuous_names: tuple[str, ...]
    discrete_names: tuple[str, ...]
    discrete_categories: tuple[tuple[str, ...], ...]
    label_name: str = "grade"
    label_alphabet: str = GRADES

    def __post_init__(self):
        object.__setattr__(self, "continuous_names", tuple(self.continuous_names))
        object.__setattr__(self, "discrete_names", tuple(self.discrete_names))
        object.__setattr__(
            self, "discrete_categories", tuple(tuple(str(c) for c in cats) for cats in self.discrete_categories)
        )
        names = self.continuous_names + self.discrete_names
        if not names:
            raise SchemaError("schema has no features")
        if len(set(names)) != len(names):
            raise SchemaError("continuous and discrete feature names must be disjoint and unique")
        if len(self.discrete_categories) != len(self.discrete_names):
            raise SchemaError("one category list is required per discrete feature")
        if len(self.label_alphabet) < 2:
            raise SchemaError("n_classes must be >= 2")

    @property
    def n_classes(self) -> int:
        return len(self.label_alphabet)

    @property
    def n_continuous(self) -> int:
        return len(self.continuous_names)

    @property
    def discrete_cardinalities(self) -> tuple[int, ...]:
        return tuple(len(c) for c in self.discrete_categories)

    @property
    def n_features(self) -> int:
        return self.n_continuous + sum(self.discrete_cardinalities)

    def onehot_slices(self) -> list[slice]:
        out, start = [], self.n_continuous
        for k in self.discrete_cardinalities:
            out.append(slice(start, start + k))
            start += k
        return out

    def to_dict(self) -> dict:
        return {
            "continuous_names": list(self.continuous_names),
            "discrete_names": list(self.discrete_names),
            "discrete_categories": [list(c) for c in self.discrete_categories],
            "label_name": self.label_name,
            "label_alphabet": self.label_alphabet,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        discrete = d.get("discrete_names", [])
        # empty category lists are filled in from the data by load_csv
        cats = d.get("discrete_categories") or [[] for _ in discrete]
        return cls(
            d.get("continuous_names", []),
            discrete,
            cats,
            d.get("label_name", "grade"),
            d.get("label_alphabet", GRADES),
        )

    @classmethod
    def load(cls, path) -> "Schema":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"schema file not found: {path}")
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


@dataclass(frozen=True)
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != std.shape or mean.ndim != 1:
            raise ValueError("mean and std must be 1-d arrays of equal length")
        if np.any(~(std > 0)):
            raise DegenerateFeatureError("standard deviations must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def __len__(self):
        return self.mean.shape[0]

    def transform(self, raw: np.ndarray) -> np.ndarray:
        return (raw - self.mean) / self.std

    def invert(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "StandardizationStats":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix, integer grade labels and the metadata needed to move
    between standardized and raw space.

    ``stats`` is None while the continuous block still holds raw values.
    """

    x: np.ndarray
    y: np.ndarray
    schema: Schema
    raw_continuous: np.ndarray
    stats: StandardizationStats | None = None
    ids: np.ndarray | None = field(default=None)

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        raw = np.ascontiguousarray(self.raw_continuous, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.schema.n_features:
            raise SchemaError(f"x must have {self.schema.n_features} columns")
        if y.shape != (x.shape[0],) or raw.shape != (x.shape[0], self.schema.n_continuous):
            raise SchemaError("x, y and raw_continuous row counts differ")
        if y.size and (y.min() < 0 or y.max() >= self.schema.n_classes):
            raise SchemaError("labels out of range")
        ids = np.arange(x.shape[0]) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        for a in (x, y, raw, ids):
            a.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "raw_continuous", raw)
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return self.x.shape[0]

    @property
    def n_continuous(self) -> int:
        return self.schema.n_continuous

    @property
    def standardized(self) -> bool:
        return self.stats is not None

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, x=self.x[idx], y=self.y[idx], raw_continuous=self.raw_continuous[idx], ids=self.ids[idx])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for a in (self.x, self.y, self.raw_continuous):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {
            "schema": self.schema.to_dict(),
            "stats": None if self.stats is None else self.stats.to_dict(),
            "ids": self.ids.tolist(),
            "x": self.x.tolist(),
            "y": self.y.tolist(),
            "raw_continuous": self.raw_continuous.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Dataset":
        schema = Schema(**{k: v for k, v in d["schema"].items()})
        n_feat = schema.n_features
        x = np.array(d["x"], dtype=np.float64).reshape(-1, n_feat)
        raw = np.array(d["raw_continuous"], dtype=np.float64).reshape(-1, schema.n_continuous)
        stats = None if d.get("stats") is None else StandardizationStats.from_dict(d["stats"])
        return cls(x, np.array(d["y"], dtype=np.int64), schema, raw, stats, np.array(d["ids"], dtype=np.int64))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path) -> "Dataset":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def _onehot(codes: np.ndarray, cardinalities: Sequence[int]) -> np.ndarray:
    n = codes.shape[0]
    blocks = []
    for j, k in enumerate(cardinalities):
        b = np.zeros((n, k))
        b[np.arange(n), codes[:, j]] = 1.0
        blocks.append(b)
    return np.hstack(blocks) if blocks else np.zeros((n, 0))


def load_csv(path, schema) -> tuple[Dataset, int]:
    """Read a loan CSV into an unstandardized :class:`Dataset`.

    Rows with a missing or unparseable required field are dropped.  Labels
    are mapped through the schema alphabet (A -> 0, ..., G -> 6); a
    subgrade such as ``B3`` maps to its coarse grade.

    Returns
    -------
    dataset, n_dropped
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"CSV file not found: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        required = [*schema.continuous_names, *schema.discrete_names, schema.label_name]
        for name in required:
            if name not in header:
                raise SchemaError(f"missing column: {name!r}")
        alphabet = {g: i for i, g in enumerate(schema.label_alphabet)}
        raws, discs, labels = [], [], []
        dropped = 0
        for row in reader:
            try:
                cont = [float(row[c]) for c in schema.continuous_names]
                if not all(math.isfinite(v) for v in cont):
                    raise ValueError
                disc = [row[c].strip() for c in schema.discrete_names]
                if any(v == "" for v in disc):
                    raise ValueError
                label = alphabet[row[schema.label_name].strip()[:1]]
            except (ValueError, KeyError, TypeError, AttributeError):
                dropped += 1
                continue
            raws.append(cont)
            discs.append(disc)
            labels.append(label)
    if not labels:
        raise EmptyDatasetError(f"no usable rows in {path}")

    observed = list(zip(*discs)) if schema.discrete_names else []
    cats = [c if c else sorted(set(o)) for c, o in zip(schema.discrete_categories, observed)]
    schema = replace(schema, discrete_categories=cats)
    codes = np.zeros((len(labels), len(schema.discrete_names)), dtype=np.int64)
    keep = np.ones(len(labels), dtype=bool)
    lookup = [{c: i for i, c in enumerate(cats)} for cats in schema.discrete_categories]
    for r, disc in enumerate(discs):
        for j, v in enumerate(disc):
            if v not in lookup[j]:
                keep[r] = False
                break
            codes[r, j] = lookup[j][v]
    dropped += int((~keep).sum())
    if not keep.any():
        raise EmptyDatasetError(f"no usable rows in {path}")

    raw = np.array(raws, dtype=np.float64).reshape(len(labels), schema.n_continuous)[keep]
    x = np.hstack([raw, _onehot(codes[keep], schema.discrete_cardinalities)])
    return Dataset(x, np.array(labels)[keep], schema, raw), dropped


def fit_standardize(ds: Dataset) -> tuple[Dataset, StandardizationStats]:
    """Z-score the continuous block using this split's own statistics
    (population standard deviation)."""
    if ds.standardized:
        raise ValueError("dataset is already standardized")
    raw = ds.raw_continuous
    mean = raw.mean(axis=0)
    std = raw.std(axis=0)
    for j, s in enumerate(std):
        if not s > 0:
            raise DegenerateFeatureError(f"zero-variance feature: {ds.schema.continuous_names[j]!r}")
    stats = StandardizationStats(mean, std)
    return apply_standardize(ds, stats), stats


def apply_standardize(ds: Dataset, stats: StandardizationStats) -> Dataset:
    if len(stats) != ds.n_continuous:
        raise ValueError(f"stats cover {len(stats)} features, dataset has {ds.n_continuous} continuous features")
    x = ds.x.copy()
    x[:, : ds.n_continuous] = stats.transform(ds.raw_continuous)
    return replace(ds, x=x, stats=stats)


def invert_standardize(ds: Dataset) -> np.ndarray:
    """Raw continuous values recovered from the standardized block."""
    if ds.stats is None:
        raise ValueError("dataset is not standardized")
    return ds.stats.invert(ds.x[:, : ds.n_continuous])


def split(ds: Dataset, test_fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    n = len(ds)
    n_test = int(round(n * test_fraction))
    if n_test == 0 or n_test == n:
        raise ValueError(f"split of {n} rows at fraction {test_fraction} leaves an empty side")
    perm = np.random.default_rng(seed).permutation(n)
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


# ---------------------------------------------------------------------------
# synthetic data

@dataclass(frozen=True)
class SyntheticSpec:
    """Class-conditional generator: Gaussian continuous features with
    diagonal covariance, independent categorical discrete features."""

    schema: Schema
    class_priors: np.ndarray  # (n_classes,)
    means: np.ndarray  # (n_classes, n_continuous), raw units
    variances: np.ndarray  # (n_classes, n_continuous)
    discrete_probs: tuple[np.ndarray, ...]  # one (n_classes, cardinality) table per discrete feature

    def __post_init__(self):
        k, d = self.schema.n_classes, self.schema.n_continuous
        priors = np.asarray(self.class_priors, dtype=np.float64)
        means = np.asarray(self.means, dtype=np.float64)
        var = np.asarray(self.variances, dtype=np.float64)
        probs = tuple(np.asarray(p, dtype=np.float64) for p in self.discrete_probs)
        if priors.shape != (k,) or means.shape != (k, d) or var.shape != (k, d):
            raise SyntheticSpecError("prior / mean / variance shapes do not match the schema")
        if np.any(~(var > 0)):
            raise SyntheticSpecError("variances must be positive")
        if np.any(priors < 0) or abs(priors.sum() - 1.0) > 1e-9:
            raise SyntheticSpecError("class priors must be a probability vector")
        if len(probs) != len(self.schema.discrete_names):
            raise SyntheticSpecError("one probability table per discrete feature is required")
        for p, card in zip(probs, self.schema.discrete_cardinalities):
            if p.shape != (k, card):
                raise SyntheticSpecError("discrete probability table has the wrong shape")
            if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-9):
                raise SyntheticSpecError("discrete category probabilities must sum to 1")
        object.__setattr__(self, "class_priors", priors)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", var)
        object.__setattr__(self, "discrete_probs", probs)

    def to_dict(self) -> dict:
        return {
            "schema": self.schema.to_dict(),
            "class_priors": self.class_priors.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "discrete_probs": [p.tolist() for p in self.discrete_probs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        try:
            return cls(
                Schema(**d["schema"]),
                np.array(d["class_priors"]),
                np.array(d["means"]),
                np.array(d["variances"]),
                tuple(np.array(p) for p in d["discrete_probs"]),
            )
        except (KeyError, TypeError) as e:
            raise SyntheticSpecError(f"malformed synthetic spec: {e}") from e

    @classmethod
    def load(cls, path) -> "SyntheticSpec":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"synthetic spec not found: {path}")
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


# (name, base mean, within-class std, shift per grade step in std units)
# Positive shift means the value rises toward worse grades.
_DEFAULT_CONTINUOUS = [
    ("fico", 700.0, 40.0, -1.6),
    ("dti", 18.0, 2.0, 1.2),
    ("loan_to_income", 0.30, 0.015, 2.4),
    ("revol_util", 50.0, 5.0, 1.0),
    ("annual_income", 70000.0, 8000.0, -1.0),
    ("open_acc", 11.0, 2.0, 0.6),
    ("inq_last_6mths", 5.0, 1.0, 0.8),
    ("emp_length", 6.0, 1.5, -0.5),
    ("total_acc", 25.0, 4.0, 0.0),
    ("mort_acc", 3.0, 0.8, 0.0),
]
_DEFAULT_DISCRETE = [
    ("home_ownership", ("MORTGAGE", "OWN", "RENT")),
    ("purpose", ("car", "credit_card", "debt_consolidation", "other")),
]
_DEFAULT_PRIORS = [0.15, 0.25, 0.25, 0.17, 0.10, 0.05, 0.03]


def default_synthetic_spec() -> SyntheticSpec:
    """Ten continuous and two discrete loan-like features over grades A-G."""
    schema = Schema(
        [c[0] for c in _DEFAULT_CONTINUOUS],
        [d[0] for d in _DEFAULT_DISCRETE],
        [d[1] for d in _DEFAULT_DISCRETE],
    )
    k = schema.n_classes
    steps = np.arange(k) - (k - 1) / 2
    base = np.array([c[1] for c in _DEFAULT_CONTINUOUS])
    sd = np.array([c[2] for c in _DEFAULT_CONTINUOUS])
    shift = np.array([c[3] for c in _DEFAULT_CONTINUOUS])
    means = base + steps[:, None] * shift * sd
    variances = np.tile(sd**2, (k, 1))
    t = np.linspace(0.0, 1.0, k)[:, None]
    home = (1 - t) * np.array([0.5, 0.2, 0.3]) + t * np.array([0.2, 0.1, 0.7])
    purpose = (1 - t) * np.array([0.2, 0.4, 0.3, 0.1]) + t * np.array([0.1, 0.2, 0.5, 0.2])
    return SyntheticSpec(schema, np.array(_DEFAULT_PRIORS), means, variances, (home, purpose))


def synth_generate(seed: int, n: int, spec: SyntheticSpec | None = None) -> Dataset:
    """Draw ``n`` unstandardized samples; a pure function of its arguments."""
    if n < 1:
        raise ValueError("n must be >= 1")
    spec = default_synthetic_spec() if spec is None else spec
    rng = np.random.default_rng(seed)
    y = rng.choice(spec.schema.n_classes, size=n, p=spec.class_priors)
    raw = spec.means[y] + rng.standard_normal((n, spec.schema.n_continuous)) * np.sqrt(spec.variances[y])
    codes = np.empty((n, len(spec.discrete_probs)), dtype=np.int64)
    for j, table in enumerate(spec.discrete_probs):
        cdf = np.cumsum(table[y], axis=1)
        u = rng.random(n)[:, None]
        codes[:, j] = np.minimum((u > cdf).sum(axis=1), table.shape[1] - 1)
    x = np.hstack([raw, _onehot(codes, spec.schema.discrete_cardinalities)])
    return Dataset(x, y, spec.schema, raw)


def synthetic_fixture(seed: int = 7, n_train: int = 5000, n_test: int = 1000, spec: SyntheticSpec | None = None):
    """Standardized train/test pair drawn from the default synthetic spec;
    the test split reuses the train statistics."""
    ds = synth_generate(seed, n_train + n_test, spec)
    train, test = split(ds, n_test / (n_train + n_test), seed)
    train, stats = fit_standardize(train)
    return train, apply_standardize(test, stats)
