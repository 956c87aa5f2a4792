"""Standard scaling of embeddings."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

__all__ = ["Scaler", "fit_scaler", "apply_scaler"]

DEGENERATE_STD = 1e-12


class Scaler(TransformerMixin, BaseEstimator):
    """Zero-mean, unit-variance scaling with population statistics.

    Columns whose standard deviation falls below ``1e-12`` get a scale of
    1, so constant columns are mapped to zero rather than blown up.

    Attributes
    ----------
    mean_ : ndarray of shape (n_features,)
    std_ : ndarray of shape (n_features,)
    """

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        std = X.std(axis=0)  # ddof=0
        std[std < DEGENERATE_STD] = 1.0
        self.mean_ = X.mean(axis=0)
        self.std_ = std
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.mean_.shape[0]:
            raise ValueError(
                f"X has {X.shape[1]} features, scaler was fit on {self.mean_.shape[0]}"
            )
        return (X - self.mean_) / self.std_

    def inverse_transform(self, X):
        check_is_fitted(self, "mean_")
        X = check_array(X, dtype=np.float64)
        return X * self.std_ + self.mean_

    @classmethod
    def from_stats(cls, mean, std) -> "Scaler":
        mean = np.array(mean, dtype=np.float64).ravel()
        std = np.array(std, dtype=np.float64).ravel()
        if mean.shape != std.shape:
            raise ValueError("mean and std must have the same length")
        if not (np.isfinite(std).all() and (std > 0).all() and np.isfinite(mean).all()):
            raise ValueError("std entries must be positive and finite, mean finite")
        s = cls()
        s.mean_, s.std_, s.n_features_in_ = mean, std, mean.shape[0]
        return s

    @classmethod
    def identity(cls, d: int) -> "Scaler":
        return cls.from_stats(np.zeros(d), np.ones(d))

    def same_stats(self, other: "Scaler") -> bool:
        return (
            self.mean_.shape == other.mean_.shape
            and np.array_equal(self.mean_, other.mean_)
            and np.array_equal(self.std_, other.std_)
        )


def fit_scaler(features) -> Scaler:
    return Scaler().fit(features)


def apply_scaler(scaler: Scaler, features) -> np.ndarray:
    return scaler.transform(features)
