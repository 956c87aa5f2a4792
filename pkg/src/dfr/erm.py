"""A small ReLU network trained by ERM, used as the feature extractor.

Forward and backward passes are written out by hand in float64 so that
:func:`grad_check` can hold them to finite differences.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._rng import make_rng
from .data import EmbeddingDataset

__all__ = [
    "MlpModel",
    "TrainConfig",
    "TrainingDivergedError",
    "init_mlp",
    "loss_and_grads",
    "train_erm",
    "extract_features",
    "grad_check",
    "save_model",
    "load_model",
    "ERMNetwork",
]


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training loss became non-finite ({loss}) in epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


@dataclass
class MlpModel:
    """Feed-forward net: ReLU hidden layers, identity output (logits).

    ``weights[k]`` has shape ``(sizes[k + 1], sizes[k])``.
    """

    sizes: Tuple[int, ...]
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    train_losses: List[float] = field(default_factory=list)

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if len(self.weights) != len(self.sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("one weight matrix and bias per layer required")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (self.sizes[k + 1], self.sizes[k]) or b.shape != (self.sizes[k + 1],):
                raise ValueError(f"layer {k} has incompatible shapes {W.shape}, {b.shape}")

    @property
    def n_inputs(self) -> int:
        return self.sizes[0]

    @property
    def n_classes(self) -> int:
        return self.sizes[-1]

    @property
    def n_features(self) -> int:
        return self.sizes[-2]

    def params(self) -> List[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "MlpModel":
        return MlpModel(self.sizes, [W.copy() for W in self.weights],
                        [b.copy() for b in self.biases], list(self.train_losses))

    def _check_width(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_inputs:
            raise ValueError(f"inputs have shape {X.shape}, model expects width {self.n_inputs}")
        return X

    def features(self, X) -> np.ndarray:
        """Penultimate activations (post-ReLU of the last hidden layer)."""
        h = self._check_width(X)
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ W.T + b, 0.0)
        return h

    def logits(self, X) -> np.ndarray:
        return self.features(X) @ self.weights[-1].T + self.biases[-1]

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.logits(X), axis=1)

    def equals(self, other: "MlpModel") -> bool:
        return self.sizes == other.sizes and all(
            np.array_equal(a, b) for a, b in zip(self.params(), other.params()))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-2
    weight_decay: float = 1e-3
    lr_schedule: str = "cosine"
    seed: int = 0
    hidden: Tuple[int, ...] = (64,)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("epochs must be >= 0, batch_size and learning_rate positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


def init_mlp(sizes: Sequence[int], seed: int) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    rng = make_rng(seed, "init")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        a = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpModel(tuple(sizes), weights, biases)


def loss_and_grads(model: MlpModel, X, y):
    """Mean cross-entropy over the batch and its gradient for every parameter.

    Gradients come back in the order of :meth:`MlpModel.params`.
    """
    X = model._check_width(X)
    y = np.asarray(y, dtype=np.int64)
    acts = [X]
    pre = []
    h = X
    L = len(model.weights)
    for k, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ W.T + b
        pre.append(z)
        h = np.maximum(z, 0.0) if k < L - 1 else z
        acts.append(h)
    Z = acts[-1]
    m = Z.max(axis=1, keepdims=True)
    E = np.exp(Z - m)
    tot = E.sum(axis=1, keepdims=True)
    n = X.shape[0]
    rows = np.arange(n)
    loss = float(np.mean(m[:, 0] + np.log(tot[:, 0]) - Z[rows, y]))

    delta = E / tot
    delta[rows, y] -= 1.0
    delta /= n
    grads = [None] * (2 * L)
    for k in range(L - 1, -1, -1):
        grads[2 * k] = delta.T @ acts[k]
        grads[2 * k + 1] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ model.weights[k]) * (pre[k - 1] > 0)
    return loss, grads


def _xy(raw):
    if hasattr(raw, "inputs"):
        return np.asarray(raw.inputs, dtype=np.float64), np.asarray(raw.labels), raw.n_classes
    X, y = raw[0], raw[1]
    y = np.asarray(y)
    n_classes = raw[2] if len(raw) > 2 else int(y.max()) + 1
    return np.asarray(X, dtype=np.float64), y, n_classes


def train_erm(raw, config: TrainConfig = TrainConfig()) -> MlpModel:
    """Minibatch SGD (no momentum) on the mean cross-entropy.

    ``raw`` is a :class:`~dfr.synth.RawDataset` or an ``(X, y[, n_classes])``
    tuple.  Weight decay is added to the gradient of every parameter and
    the learning rate follows the configured per-epoch schedule.  The
    returned model carries the mean training loss of each epoch in
    ``train_losses``.
    """
    X, y, C = _xy(raw)
    if C < 2:
        raise ValueError("need at least two classes")
    if not np.isfinite(X).all():
        raise ValueError("inputs contain non-finite values")
    model = init_mlp((X.shape[1],) + config.hidden + (C,), config.seed)
    rng = make_rng(config.seed, "batches")
    n = X.shape[0]
    params = model.params()
    for epoch in range(config.epochs):
        if config.lr_schedule == "cosine":
            lr = 0.5 * config.learning_rate * (1.0 + math.cos(math.pi * epoch / config.epochs))
        else:
            lr = config.learning_rate
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            # overflow is caught below as divergence
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = loss_and_grads(model, X[idx], y[idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            total += loss * idx.size
            for p, g in zip(params, grads):
                if config.weight_decay:
                    g = g + config.weight_decay * p
                p -= lr * g
        epoch_loss = total / n
        if not math.isfinite(epoch_loss) or not all(np.isfinite(p).all() for p in params):
            raise TrainingDivergedError(epoch, epoch_loss)
        model.train_losses.append(epoch_loss)
    return model


def extract_features(model: MlpModel, inputs) -> EmbeddingDataset:
    """Penultimate activations with labels and groups copied through."""
    X = inputs.inputs if hasattr(inputs, "inputs") else inputs.features
    feats = model.features(X)
    return EmbeddingDataset(feats, inputs.labels, inputs.groups, inputs.n_classes, inputs.n_groups)


def grad_check(model: MlpModel, batch, epsilon: float = 1e-6, n_params: int = 100,
               seed: int = 0, skip_below: float = 1e-8) -> float:
    """Max relative error between backprop and central differences.

    Checks ``n_params`` randomly chosen parameters (all of them if the model
    is smaller).  Coordinates where both gradients are below ``skip_below``
    are skipped; if all are skipped the result is 0.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    X, y = batch[0], batch[1]
    if len(y) == 0:
        raise ValueError("batch is empty")
    probe = model.copy()
    _, grads = loss_and_grads(probe, X, y)
    params = probe.params()
    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    rng = make_rng(seed, "gradcheck")
    flat_ids = np.arange(total) if total <= n_params else rng.choice(total, n_params, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for fid in flat_ids:
        k = int(np.searchsorted(offsets, fid, side="right") - 1)
        j = int(fid - offsets[k])
        p = params[k].reshape(-1)
        old = p[j]
        p[j] = old + epsilon
        lp, _ = loss_and_grads(probe, X, y)
        p[j] = old - epsilon
        lm, _ = loss_and_grads(probe, X, y)
        p[j] = old
        g_fd = (lp - lm) / (2 * epsilon)
        g_an = grads[k].reshape(-1)[j]
        scale = max(abs(g_an), abs(g_fd))
        if scale < skip_below:
            continue
        worst = max(worst, abs(g_an - g_fd) / max(scale, 1e-8))
    return worst


_MODEL = struct.Struct("<4sII")


def model_to_bytes(model: MlpModel) -> bytes:
    parts = [_MODEL.pack(b"DFRM", 1, len(model.sizes)),
             np.asarray(model.sizes, dtype="<u4").tobytes()]
    for W, b in zip(model.weights, model.biases):
        parts += [W.astype("<f8").tobytes(), b.astype("<f8").tobytes()]
    return b"".join(parts)


def save_model(model: MlpModel, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(model_to_bytes(model))


def load_model(path) -> MlpModel:
    buf = Path(path).read_bytes()
    if len(buf) < _MODEL.size:
        raise ValueError(f"{path}: truncated model checkpoint")
    magic, version, n_sizes = _MODEL.unpack_from(buf, 0)
    if magic != b"DFRM":
        raise ValueError(f"{path}: bad magic {magic!r}, expected b'DFRM'")
    if version != 1:
        raise ValueError(f"{path}: unsupported model version {version}")
    off = _MODEL.size
    sizes = tuple(int(s) for s in np.frombuffer(buf, dtype="<u4", count=n_sizes, offset=off))
    off += 4 * n_sizes
    n_params = sum(o * i + o for i, o in zip(sizes[:-1], sizes[1:]))
    if len(buf) != off + 8 * n_params:
        raise ValueError(f"{path}: expected {off + 8 * n_params} bytes, found {len(buf)}")
    vals = np.frombuffer(buf, dtype="<f8", offset=off)
    weights, biases, pos = [], [], 0
    for i, o in zip(sizes[:-1], sizes[1:]):
        weights.append(vals[pos:pos + o * i].reshape(o, i).copy())
        pos += o * i
        biases.append(vals[pos:pos + o].copy())
        pos += o
    return MlpModel(sizes, weights, biases)


class ERMNetwork(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` trains by ERM, ``transform`` returns
    penultimate features, ``predict`` uses the network's own head."""

    def __init__(self, hidden=(64,), epochs=100, batch_size=32, learning_rate=1e-2,
                 weight_decay=1e-3, lr_schedule="cosine", random_state=0):
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.lr_schedule = lr_schedule
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        cfg = TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.weight_decay,
                          self.lr_schedule, int(self.random_state), tuple(self.hidden))
        self.model_ = train_erm((X, y_enc, len(self.classes_)), cfg)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return self.model_.features(check_array(X, dtype=np.float64))

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return self.model_.logits(check_array(X, dtype=np.float64))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
