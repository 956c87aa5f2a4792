"""Regularized multinomial logistic regression.

The objective for a head ``(W, b)`` on scaled features ``X`` is::

    F(W, b) = (1/n) * sum_i s_i * CE(softmax(W x_i + b), y_i) + lam * P(W)

where ``s_i`` is the class weight of ``y_i`` times an optional per-example
weight, ``P`` is ``||W||_1`` (entrywise), ``0.5 * ||W||_F^2`` or zero, and
the bias is never penalized.  With the default ``lambda_scaling="per_sample"``
the penalty strength is ``lam = 1 / (C * n)``, so ``C`` has the meaning of
the inverse regularization strength in ``C * sum_i CE_i + P(W)``.  With
``"absolute"`` it is ``lam = 1 / C``.

Minimization uses monotone FISTA with backtracking and function-value
restarts.  Iteration stops once the first-order optimality violation
(see :func:`kkt_violation`) drops below ``tol``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .preprocessing import Scaler

__all__ = [
    "SolverConfig",
    "LinearHead",
    "LogisticHead",
    "objective",
    "smooth_loss_and_grad",
    "kkt_violation",
    "fit_logreg",
    "soft_threshold",
    "predict_logits",
    "predict_proba",
    "predict_labels",
    "average_weights",
    "save_head",
    "load_head",
]

PENALTIES = ("l1", "l2", "none")


@dataclass(frozen=True)
class SolverConfig:
    penalty: str = "l1"
    C: float = 1.0
    class_weights: Optional[tuple] = None
    max_iter: int = 10_000
    tol: float = 1e-7
    lambda_scaling: str = "per_sample"
    seed: int = 0

    def __post_init__(self):
        if self.penalty not in PENALTIES:
            raise ValueError(f"penalty must be one of {PENALTIES}, got {self.penalty!r}")
        if not self.C > 0:
            raise ValueError(f"C must be positive, got {self.C}")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 0:
            raise ValueError("max_iter must be >= 0")
        if self.lambda_scaling not in ("per_sample", "absolute"):
            raise ValueError(f"unknown lambda_scaling {self.lambda_scaling!r}")
        if self.class_weights is not None:
            cw = tuple(float(w) for w in self.class_weights)
            if any(not w > 0 for w in cw):
                raise ValueError("class weights must be positive")
            object.__setattr__(self, "class_weights", cw)

    def lam(self, n: int) -> float:
        if self.penalty == "none":
            return 0.0
        if self.lambda_scaling == "per_sample":
            return 1.0 / (self.C * n)
        return 1.0 / self.C


@dataclass(eq=False)
class LinearHead:
    """A linear classification head with its input scaler.

    ``W`` and ``b`` act on scaled features; :func:`predict_logits` applies
    the scaler to raw inputs first.  ``info`` carries solver diagnostics
    (convergence flag, iteration count, final objective).
    """

    W: np.ndarray
    b: np.ndarray
    scaler: Scaler
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.W = np.atleast_2d(np.asarray(self.W, dtype=np.float64))
        self.b = np.asarray(self.b, dtype=np.float64).ravel()
        if self.W.shape[0] != self.b.shape[0]:
            raise ValueError(f"W has {self.W.shape[0]} rows but b has {self.b.shape[0]} entries")
        if self.scaler.mean_.shape[0] != self.W.shape[1]:
            raise ValueError("scaler width does not match W")
        if not (np.isfinite(self.W).all() and np.isfinite(self.b).all()):
            raise ValueError("head parameters must be finite")

    @property
    def n_classes(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    def logits(self, X_raw) -> np.ndarray:
        return predict_logits(self, X_raw)

    def predict(self, X_raw) -> np.ndarray:
        return predict_labels(self, X_raw)

    def predict_proba(self, X_raw) -> np.ndarray:
        return predict_proba(self, X_raw)

    def equals(self, other: "LinearHead") -> bool:
        return (
            np.array_equal(self.W, other.W)
            and np.array_equal(self.b, other.b)
            and self.scaler.same_stats(other.scaler)
        )


def soft_threshold(x, t):
    """Proximal operator of ``t * |.|``: ``sign(x) * max(|x| - t, 0)``."""
    if np.any(np.asarray(t) < 0):
        raise ValueError("threshold must be non-negative")
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def _example_weights(y, n_classes, config, sample_weight):
    cw = np.ones(n_classes) if config.class_weights is None else np.asarray(config.class_weights)
    if cw.shape != (n_classes,):
        raise ValueError(f"expected {n_classes} class weights, got {cw.shape[0]}")
    s = cw[y]
    if sample_weight is not None:
        sw = np.asarray(sample_weight, dtype=np.float64)
        if sw.shape != y.shape or (sw < 0).any():
            raise ValueError("sample_weight must be non-negative with one entry per row")
        s = s * sw
    return s


def _penalty(W, penalty):
    if penalty == "l1":
        return np.abs(W).sum()
    if penalty == "l2":
        return 0.5 * np.sum(W * W)
    return 0.0


def _smooth(theta, Xa, y, s, n, need_grad=True):
    Z = Xa @ theta.T
    m = Z.max(axis=1, keepdims=True)
    E = np.exp(Z - m)
    tot = E.sum(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(tot[:, 0])
    rows = np.arange(len(y))
    loss = float(np.dot(s, lse - Z[rows, y])) / n
    if not need_grad:
        return loss, None
    R = E / tot
    R[rows, y] -= 1.0
    R *= (s / n)[:, None]
    return loss, R.T @ Xa


def _objective_change(x, z, Xa, y, s, n, lam, penalty):
    """``F(z) - F(x)`` without cancellation, for nearby ``x`` and ``z``.

    Near the optimum the decrease of one step drops below the resolution
    of ``F`` itself; differencing logits and using ``log1p``/``expm1``
    keeps it accurate to relative precision.
    """
    Zx = Xa @ x.T
    D = Xa @ (z - x).T
    P = np.exp(Zx - Zx.max(axis=1, keepdims=True))
    P /= P.sum(axis=1, keepdims=True)
    rows = np.arange(len(y))
    smooth = np.log1p(np.sum(P * np.expm1(D), axis=1)) - D[rows, y]
    dW = z[:, :-1] - x[:, :-1]
    if penalty == "l1":
        pen = np.sum(np.abs(z[:, :-1]) - np.abs(x[:, :-1]))
    elif penalty == "l2":
        pen = 0.5 * np.sum(dW * (z[:, :-1] + x[:, :-1]))
    else:
        pen = 0.0
    return float(np.dot(s, smooth)) / n + lam * pen


def _augment(X):
    return np.hstack([X, np.ones((X.shape[0], 1))])


def _check_inputs(X, y, n_classes=None):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(np.int64).ravel()
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError(f"X shape {X.shape} incompatible with {y.shape[0]} labels")
    if n_classes is not None and ((y < 0) | (y >= n_classes)).any():
        raise ValueError("labels out of range")
    return X, y


def smooth_loss_and_grad(W, b, X, y, config: SolverConfig, sample_weight=None):
    """Weighted mean cross-entropy and its gradient w.r.t. ``(W, b)``."""
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    b = np.asarray(b, dtype=np.float64)
    X, y = _check_inputs(X, y, W.shape[0])
    if X.shape[1] != W.shape[1]:
        raise ValueError(f"X has {X.shape[1]} features, W expects {W.shape[1]}")
    s = _example_weights(y, W.shape[0], config, sample_weight)
    theta = np.hstack([W, b[:, None]])
    loss, g = _smooth(theta, _augment(X), y, s, X.shape[0])
    return loss, g[:, :-1], g[:, -1]


def objective(head, X, y, config: SolverConfig, sample_weight=None) -> float:
    """Full objective for a head (or ``(W, b)`` pair) on already-scaled ``X``."""
    W, b = (head.W, head.b) if isinstance(head, LinearHead) else head
    loss, _, _ = smooth_loss_and_grad(W, b, X, y, config, sample_weight)
    X = np.asarray(X)
    return loss + config.lam(X.shape[0]) * _penalty(np.asarray(W, dtype=np.float64), config.penalty)


def _kkt_from_grad(W, gW, gb, lam, penalty):
    if penalty == "l1":
        zero = W == 0
        v = np.where(zero, np.maximum(np.abs(gW) - lam, 0.0), np.abs(gW + lam * np.sign(W)))
    elif penalty == "l2":
        v = np.abs(gW + lam * W)
    else:
        v = np.abs(gW)
    return max(float(v.max(initial=0.0)), float(np.abs(gb).max(initial=0.0)))


def kkt_violation(head, X, y, config: SolverConfig, sample_weight=None) -> float:
    """Largest first-order optimality violation over all parameters.

    For the l1 penalty a zero weight may carry a smooth gradient of size up
    to ``lam``; a nonzero weight must satisfy ``g + lam * sign(w) = 0``.
    For l2 and no penalty this is the infinity norm of the full gradient.
    The bias gradient must vanish in every case.
    """
    W, b = (head.W, head.b) if isinstance(head, LinearHead) else head
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    _, gW, gb = smooth_loss_and_grad(W, b, X, y, config, sample_weight)
    return _kkt_from_grad(W, gW, gb, config.lam(np.asarray(X).shape[0]), config.penalty)


def _prox(theta, step, lam, penalty):
    out = theta.copy()
    if penalty == "l1":
        out[:, :-1] = soft_threshold(theta[:, :-1], step * lam)
    elif penalty == "l2":
        out[:, :-1] = theta[:, :-1] / (1.0 + step * lam)
    return out


def fit_logreg(X, y, config: SolverConfig = SolverConfig(), scaler: Optional[Scaler] = None,
               n_classes: Optional[int] = None, sample_weight=None, trace=None) -> LinearHead:
    """Fit a head on already-scaled features ``X``.

    ``scaler`` is stored on the returned head (identity when omitted).  Every
    class in ``0..n_classes-1`` must occur in ``y``.  If ``max_iter`` is hit
    before the optimality violation drops below ``tol`` the head is still
    returned, with ``info["converged"] = False``.  Passing a list as
    ``trace`` records the objective after every iteration (near the optimum
    as the running sum of exactly computed decrements, so the recorded
    sequence is non-increasing even below the resolution of ``F``).
    """
    X, y = _check_inputs(X, y)
    n, d = X.shape
    if n_classes is None:
        n_classes = int(y.max()) + 1
    if ((y < 0) | (y >= n_classes)).any():
        raise ValueError("labels out of range")
    present = np.bincount(y, minlength=n_classes)
    missing = np.flatnonzero(present == 0)
    if missing.size:
        raise ValueError(f"class {int(missing[0])} has no training rows")
    if not np.isfinite(X).all():
        raise ValueError("X contains non-finite values")
    if scaler is None:
        scaler = Scaler.identity(d)

    s = _example_weights(y, n_classes, config, sample_weight)
    lam = config.lam(n)
    pen = config.penalty
    Xa = _augment(X)

    def F(th):
        return _smooth(th, Xa, y, s, n, need_grad=False)[0] + lam * _penalty(th[:, :-1], pen)

    x = np.zeros((n_classes, d + 1))
    Fx = F(x)
    yk = x.copy()
    t = 1.0
    # Lipschitz bound of the smooth part: 0.5 * max weight / n * ||Xa||_2^2
    L = max(0.5 * s.max() / n * np.linalg.norm(Xa, 2) ** 2, 1e-12)
    L_floor = L * 1e-6
    converged = False
    it = 0
    viol = np.inf
    for it in range(1, config.max_iter + 1):
        fy, gy = _smooth(yk, Xa, y, s, n)
        while True:
            z = _prox(yk - gy / L, 1.0 / L, lam, pen)
            dz = z - yk
            fz = _smooth(z, Xa, y, s, n, need_grad=False)[0]
            if fz <= fy + np.sum(gy * dz) + 0.5 * L * np.sum(dz * dz) + 1e-15 * abs(fy):
                break
            L *= 2.0
        Fz = fz + lam * _penalty(z[:, :-1], pen)
        if abs(Fz - Fx) <= 1e-9 * max(1.0, abs(Fx)) and np.abs(Xa @ (z - x).T).max() < 1.0:
            # too close to call from the two values: use the exact difference
            Fz = Fx + _objective_change(x, z, Xa, y, s, n, lam, pen)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        if Fz <= Fx:
            x_new, F_new = z, Fz
            yk = x_new + ((t - 1.0) / t_new) * (x_new - x) + (t / t_new) * (z - x_new)
            t = t_new
        else:
            # function-value restart from the incumbent
            x_new, F_new = x, Fx
            yk = x.copy()
            t = 1.0
        x, Fx = x_new, F_new
        if trace is not None:
            trace.append(Fx)
        L = max(L * 0.9, L_floor)

        _, gx = _smooth(x, Xa, y, s, n)
        viol = _kkt_from_grad(x[:, :-1], gx[:, :-1], gx[:, -1], lam, pen)
        if viol <= config.tol:
            converged = True
            break
    else:
        if config.max_iter == 0:
            _, gx = _smooth(x, Xa, y, s, n)
            viol = _kkt_from_grad(x[:, :-1], gx[:, :-1], gx[:, -1], lam, pen)
            converged = viol <= config.tol

    info = {"converged": converged, "n_iter": it, "objective": F(x),
            "kkt_violation": viol, "lambda": lam}
    return LinearHead(x[:, :-1].copy(), x[:, -1].copy(), scaler, info)


def predict_logits(head: LinearHead, X_raw) -> np.ndarray:
    X = np.asarray(X_raw, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.shape[1] != head.d:
        raise ValueError(f"X has {X.shape[1]} features, head expects {head.d}")
    return head.scaler.transform(X) @ head.W.T + head.b


def _softmax(Z):
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def predict_proba(head: LinearHead, X_raw) -> np.ndarray:
    return _softmax(predict_logits(head, X_raw))


def predict_labels(head: LinearHead, X_raw) -> np.ndarray:
    # np.argmax resolves ties to the lowest index
    return np.argmax(predict_logits(head, X_raw), axis=1)


def average_weights(heads: Sequence[LinearHead]) -> LinearHead:
    """Elementwise mean of ``W`` and ``b`` over heads sharing one scaler."""
    heads = list(heads)
    if not heads:
        raise ValueError("need at least one head to average")
    first = heads[0]
    for h in heads[1:]:
        if h.W.shape != first.W.shape:
            raise ValueError(f"head shapes differ: {h.W.shape} vs {first.W.shape}")
        if not h.scaler.same_stats(first.scaler):
            raise ValueError("cannot average heads fit under different scalers")
    # mean as first + mean of differences: exact when all heads are equal
    W = first.W + np.mean([h.W - first.W for h in heads], axis=0)
    b = first.b + np.mean([h.b - first.b for h in heads], axis=0)
    return LinearHead(W, b, first.scaler, {"n_averaged": len(heads)})


_HEAD = struct.Struct("<4sIII")


def head_to_bytes(head: LinearHead) -> bytes:
    return b"".join((
        _HEAD.pack(b"DFRH", 1, head.n_classes, head.d),
        head.W.astype("<f8").tobytes(),
        head.b.astype("<f8").tobytes(),
        head.scaler.mean_.astype("<f8").tobytes(),
        head.scaler.std_.astype("<f8").tobytes(),
    ))


def save_head(head: LinearHead, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(head_to_bytes(head))


def load_head(path) -> LinearHead:
    buf = Path(path).read_bytes()
    if len(buf) < _HEAD.size:
        raise ValueError(f"{path}: truncated head checkpoint")
    magic, version, C, d = _HEAD.unpack_from(buf, 0)
    if magic != b"DFRH":
        raise ValueError(f"{path}: bad magic {magic!r}, expected b'DFRH'")
    if version != 1:
        raise ValueError(f"{path}: unsupported head version {version}")
    expected = _HEAD.size + 8 * (C * d + C + 2 * d)
    if len(buf) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(buf)}")
    vals = np.frombuffer(buf, dtype="<f8", offset=_HEAD.size)
    W = vals[: C * d].reshape(C, d)
    b = vals[C * d: C * d + C]
    mean = vals[C * d + C: C * d + C + d]
    std = vals[C * d + C + d:]
    return LinearHead(W.copy(), b.copy(), Scaler.from_stats(mean, std))


class LogisticHead(ClassifierMixin, BaseEstimator):
    """Estimator wrapper around :func:`fit_logreg`.

    Scales inputs with statistics from the training data (unless
    ``standardize=False``), then fits the penalized multinomial model.

    Parameters
    ----------
    penalty : {"l1", "l2", "none"}
    C : float
        Inverse regularization strength.
    class_weight : sequence of float or None
        One weight per entry of ``classes_``.
    """

    def __init__(self, penalty="l1", C=1.0, class_weight=None, max_iter=10_000, tol=1e-7,
                 lambda_scaling="per_sample", standardize=True):
        self.penalty = penalty
        self.C = C
        self.class_weight = class_weight
        self.max_iter = max_iter
        self.tol = tol
        self.lambda_scaling = lambda_scaling
        self.standardize = standardize

    def _config(self):
        cw = None if self.class_weight is None else tuple(self.class_weight)
        return SolverConfig(penalty=self.penalty, C=self.C, class_weights=cw,
                            max_iter=self.max_iter, tol=self.tol,
                            lambda_scaling=self.lambda_scaling)

    def fit(self, X, y, sample_weight=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        scaler = Scaler().fit(X) if self.standardize else Scaler.identity(X.shape[1])
        self.head_ = fit_logreg(scaler.transform(X), y_enc, self._config(), scaler=scaler,
                                n_classes=len(self.classes_), sample_weight=sample_weight)
        self.coef_ = self.head_.W
        self.intercept_ = self.head_.b
        self.n_iter_ = self.head_.info["n_iter"]
        self.converged_ = self.head_.info["converged"]
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "head_")
        return predict_logits(self.head_, check_array(X, dtype=np.float64))

    def predict_proba(self, X):
        return _softmax(self.decision_function(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


def with_overrides(config: SolverConfig, **kw) -> SolverConfig:
    return replace(config, **kw)
