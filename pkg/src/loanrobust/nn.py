"""A fixed-architecture dense classifier with hand-written backprop.

Architecture: ``input -> 100 -> 60 -> n_classes``, ReLU hidden units,
inverted dropout on both hidden layers during training, softmax head.
Everything runs in float64.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

HIDDEN = (100, 60)
CHECKPOINT_FORMAT = "loanrobust-mlp"
CHECKPOINT_VERSION = 1


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, msg: str = "non-finite loss"):
        super().__init__(f"{msg} during epoch {epoch}")
        self.epoch = epoch


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(probs: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample negative log-likelihood of the true class."""
    p = probs[np.arange(len(y)), y]
    return -np.log(np.maximum(p, np.finfo(np.float64).tiny))


class MlpModel:
    """Dense ReLU network.  ``params`` is the flat list
    ``[W1, b1, W2, b2, W3, b3]`` with ``W`` of shape (fan_in, fan_out)."""

    def __init__(self, params: list[np.ndarray], dropout: float = 0.2):
        if not 0.0 <= dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if len(params) % 2 or not params:
            raise ValueError("params must alternate weights and biases")
        params = [np.array(p, dtype=np.float64) for p in params]
        for i in range(0, len(params), 2):
            w, b = params[i], params[i + 1]
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"inconsistent shapes in layer {i // 2}")
            if i and w.shape[0] != params[i - 2].shape[1]:
                raise ValueError(f"layer {i // 2} fan-in does not match previous layer")
        self.params = params
        self.dropout = float(dropout)

    @classmethod
    def init(cls, input_dim: int, n_classes: int, seed: int = 0, hidden=HIDDEN, dropout: float = 0.2) -> "MlpModel":
        """He-initialized weights, zero biases."""
        rng = np.random.default_rng(seed)
        dims = [input_dim, *hidden, n_classes]
        params = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            params.append(rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in))
            params.append(np.zeros(fan_out))
        return cls(params, dropout)

    @property
    def dims(self) -> list[int]:
        return [self.params[0].shape[0]] + [w.shape[1] for w in self.params[::2]]

    @property
    def input_dim(self) -> int:
        return self.params[0].shape[0]

    @property
    def n_classes(self) -> int:
        return self.params[-1].shape[0]

    def copy(self) -> "MlpModel":
        return MlpModel([p.copy() for p in self.params], self.dropout)

    # -- forward / backward -------------------------------------------------

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.input_dim:
            raise ValueError(f"expected {self.input_dim} input columns, got {x.shape[1]}")
        return x

    def _forward(self, x, rng=None):
        """Returns logits and the per-layer cache needed by ``_backward``."""
        acts, masks = [x], []
        h = x
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            z = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i == n_layers - 1:
                return z, (acts, masks)
            h = np.maximum(z, 0.0)
            if rng is not None and self.dropout > 0:
                keep = 1.0 - self.dropout
                m = (rng.random(h.shape) < keep) / keep
                h = h * m
            else:
                m = None
            masks.append(m)
            acts.append(h)

    def _backward(self, cache, dlogits):
        """Backprop ``dlogits`` (n, C); returns (param grads, input grad)."""
        acts, masks = cache
        grads = [None] * len(self.params)
        delta = dlogits
        for i in reversed(range(len(self.params) // 2)):
            h = acts[i]
            grads[2 * i] = h.T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            delta = delta @ self.params[2 * i].T
            if i > 0:
                if masks[i - 1] is not None:
                    delta = delta * masks[i - 1]
                delta = delta * (h > 0)
        return grads, delta

    def logits(self, x) -> np.ndarray:
        return self._forward(self._check(x))[0]

    def forward(self, x, mode: str = "eval", rng: np.random.Generator | None = None) -> np.ndarray:
        """Class probabilities.  ``mode="train"`` applies dropout drawn from
        ``rng`` (inverted scaling, so eval mode needs no correction)."""
        if mode not in ("train", "eval"):
            raise ValueError("mode must be 'train' or 'eval'")
        if mode == "train" and rng is None:
            raise ValueError("train mode needs an rng for dropout masks")
        return softmax(self._forward(self._check(x), rng if mode == "train" else None)[0])

    predict_proba = forward

    def predict(self, x) -> np.ndarray:
        # np.argmax returns the first maximum, i.e. ties go to the smaller index
        return np.argmax(self.forward(x), axis=1)

    def _check_labels(self, y, n):
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        if y.shape[0] != n:
            raise ValueError("label count does not match input rows")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError("label out of range")
        return y

    def loss_and_grads(self, x, y, sample_weights=None, rng=None):
        """Mean (optionally weighted) cross-entropy, its parameter gradients
        and its input gradient, all from one backward pass.

        Dropout is active only when ``rng`` is given.
        """
        x = self._check(x)
        y = self._check_labels(y, x.shape[0])
        n = x.shape[0]
        if sample_weights is None:
            coef = np.full(n, 1.0 / n)
        else:
            w = np.asarray(sample_weights, dtype=np.float64)
            coef = w / w.sum()
        z, cache = self._forward(x, rng)
        logp = _log_softmax(z)
        loss = float(-(coef * logp[np.arange(n), y]).sum())
        dz = np.exp(logp)
        dz[np.arange(n), y] -= 1.0
        grads, gx = self._backward(cache, dz * coef[:, None])
        return loss, grads, gx

    def loss_input_grad(self, x, y) -> np.ndarray:
        """Per-sample gradient of each sample's own cross-entropy w.r.t. its
        input (eval mode).  Row i is d CE(x_i, y_i) / d x_i."""
        x = self._check(x)
        y = self._check_labels(y, x.shape[0])
        z, cache = self._forward(x)
        dz = softmax(z)
        dz[np.arange(len(y)), y] -= 1.0
        return self._backward(cache, dz)[1]

    def prob_jacobian(self, x) -> np.ndarray:
        """d softmax_j / d x_i for every sample: shape (n, n_classes, input_dim)."""
        x = self._check(x)
        z, cache = self._forward(x)
        p = softmax(z)
        n, c = p.shape
        jac = np.empty((n, c, x.shape[1]))
        for j in range(c):
            # d p_j / d z_k = p_j (delta_jk - p_k)
            dz = -p[:, j : j + 1] * p
            dz[:, j] += p[:, j]
            jac[:, j, :] = self._backward(cache, dz)[1]
        return jac

    # -- persistence --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "dims": self.dims,
            "dropout": self.dropout,
            "params": [p.tolist() for p in self.params],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpModel":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a model checkpoint")
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')}")
        model = cls([np.array(p, dtype=np.float64) for p in d["params"]], d["dropout"])
        if model.dims != list(d["dims"]):
            raise ValueError("checkpoint dims do not match its parameter arrays")
        return model

    def save(self, path) -> None:
        # json writes floats with repr(), which round-trips float64 exactly
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MlpModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("epochs must be >= 0, batch_size >= 1 and learning_rate > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")

    def to_dict(self) -> dict:
        return dict(epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
                    seed=self.seed, optimizer=self.optimizer)


class _Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class _Sgd:
    def __init__(self, params, lr):
        self.lr = lr

    def step(self, params, grads):
        for p, g in zip(params, grads):
            p -= self.lr * g


# batch_hook(model, x_batch, y_batch, batch_index) -> x_batch to train on
BatchHook = Callable[[MlpModel, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def train(model: MlpModel, train_ds, cfg: TrainConfig, sample_weights=None,
          batch_hook: BatchHook | None = None) -> MlpModel:
    """Minibatch training of a copy of ``model``; the input is not modified.

    ``train_ds`` is a Dataset or an ``(x, y)`` pair.  Shuffling and dropout
    masks both come from ``cfg.seed``.  ``batch_hook`` may replace each
    minibatch's inputs (adversarial training) before the gradient step.
    """
    x, y = (train_ds.x, train_ds.y) if hasattr(train_ds, "x") else train_ds
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    if cfg.batch_size > n:
        raise ValueError(f"batch_size {cfg.batch_size} exceeds training set size {n}")
    if sample_weights is not None:
        sample_weights = np.asarray(sample_weights, dtype=np.float64)
        if sample_weights.shape != (n,) or np.any(sample_weights < 0) or not sample_weights.sum() > 0:
            raise ValueError("sample_weights must be non-negative, one per sample, not all zero")

    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    opt = _Adam(model.params, cfg.learning_rate) if cfg.optimizer == "adam" else _Sgd(model.params, cfg.learning_rate)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            w = None
            if sample_weights is not None:
                w = sample_weights[idx]
                if not w.sum() > 0:
                    continue
            xb = x[idx]
            if batch_hook is not None:
                xb = batch_hook(model, xb, y[idx], idx)
            loss, grads, _ = model.loss_and_grads(xb, y[idx], w, rng=rng)
            if not np.isfinite(loss):
                raise DivergenceError(epoch)
            opt.step(model.params, grads)
    return model


def predict(model, x) -> np.ndarray:
    return model.predict(x)


def accuracy(model, ds) -> float:
    x, y = (ds.x, ds.y) if hasattr(ds, "x") else ds
    if len(y) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    return float(np.mean(model.predict(x) == np.asarray(y)))
