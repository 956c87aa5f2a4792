"""Deep feature reweighting: last-layer retraining on group-balanced data.

The head is retrained from scratch on a reweighting set: the scaler is fit
once on the whole set, then ``n_retrains`` heads are fit on independent
group-balanced subsamples (every group cut down to the size of the
smallest one) and their weights averaged.  The inverse regularization
strength ``C`` (and, for the ``tr_tr`` variant, class weights) is picked by
worst-group accuracy on held-out data.

Seeds: retrain ``k`` subsamples with ``derive_seed(seed, "retrain", k)``;
the tuning split and the tuning subsample use ``derive_seed(seed,
"tune_split")`` and ``derive_seed(seed, "tune_subsample")``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._rng import derive_seed, make_rng
from .data import EmbeddingDataset, GroupSchema
from .metrics import GroupMetrics, evaluate
from .preprocessing import Scaler
from .solver import LinearHead, SolverConfig, average_weights, fit_logreg, predict_labels

__all__ = [
    "DfrConfig",
    "DfrResult",
    "group_balanced_subsample",
    "balanced_subsample_indices",
    "stratified_halves",
    "class_weight_candidates",
    "fit_reweighted_head",
    "tune",
    "run_dfr",
    "crt_baseline",
    "lws_baseline",
    "group_balanced_sampling_retrain",
    "DFRClassifier",
]

DEFAULT_C_GRID = (1.0, 0.7, 0.3, 0.1, 0.07, 0.03, 0.01)
DEFAULT_CLASS_WEIGHT_GRID = (1.0, 2.0, 3.0, 10.0, 100.0, 300.0, 1000.0)
VARIANTS = ("val_tr", "tr_tr", "tr_nm")


@dataclass(frozen=True)
class DfrConfig:
    variant: str = "val_tr"
    n_retrains: int = 10
    c_grid: Tuple[float, ...] = DEFAULT_C_GRID
    class_weight_grid: Tuple[float, ...] = DEFAULT_CLASS_WEIGHT_GRID
    tuning_split_fraction: float = 0.5
    penalty: str = "l1"
    seed: int = 0
    max_iter: int = 5000
    tol: float = 1e-6
    lambda_scaling: str = "per_sample"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.n_retrains < 1:
            raise ValueError("n_retrains must be >= 1")
        object.__setattr__(self, "c_grid", tuple(float(c) for c in self.c_grid))
        object.__setattr__(self, "class_weight_grid",
                           tuple(float(w) for w in self.class_weight_grid))
        if not self.c_grid or any(c <= 0 for c in self.c_grid):
            raise ValueError("c_grid must be a nonempty list of positive values")
        if not self.class_weight_grid or any(w <= 0 for w in self.class_weight_grid):
            raise ValueError("class_weight_grid must be a nonempty list of positive values")
        if not 0.0 < self.tuning_split_fraction < 1.0:
            raise ValueError("tuning_split_fraction must lie in (0, 1)")

    def solver(self, C: float, class_weights=None) -> SolverConfig:
        return SolverConfig(penalty=self.penalty, C=C, class_weights=class_weights,
                            max_iter=self.max_iter, tol=self.tol,
                            lambda_scaling=self.lambda_scaling, seed=self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["c_grid"] = list(self.c_grid)
        d["class_weight_grid"] = list(self.class_weight_grid)
        return d


@dataclass(eq=False)
class DfrResult:
    head: LinearHead
    chosen_C: float
    chosen_class_weights: Optional[Tuple[float, ...]]
    retrain_seeds: List[int]
    subset_sizes: List[int]
    tuning_table: List[dict]
    test_metrics: Optional[GroupMetrics]
    config: DfrConfig
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "variant": self.config.variant,
            "chosen_C": self.chosen_C,
            "chosen_class_weights": (None if self.chosen_class_weights is None
                                     else list(self.chosen_class_weights)),
            "retrain_seeds": [int(s) for s in self.retrain_seeds],
            "subset_sizes": [int(s) for s in self.subset_sizes],
            "tuning_table": self.tuning_table,
            "test_metrics": None if self.test_metrics is None else self.test_metrics.to_dict(),
            "config": self.config.to_dict(),
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def balanced_subsample_indices(groups, n_groups: int, seed: int) -> np.ndarray:
    """Row indices keeping ``m = min group count`` rows of every group.

    Groups of size ``m`` are kept whole; larger ones are sampled uniformly
    without replacement.  Indices are returned sorted.
    """
    groups = np.asarray(groups, dtype=np.int64)
    counts = np.bincount(groups, minlength=n_groups)
    if counts.size > n_groups:
        raise ValueError(f"group id {counts.size - 1} exceeds n_groups={n_groups}")
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ValueError(f"group {int(empty[0])} has no rows")
    m = int(counts.min())
    rng = make_rng(seed, "subsample")
    keep = []
    for g in range(n_groups):
        idx = np.flatnonzero(groups == g)
        keep.append(idx if idx.size == m else rng.choice(idx, size=m, replace=False))
    return np.sort(np.concatenate(keep))


def group_balanced_subsample(dataset: EmbeddingDataset, seed: int) -> EmbeddingDataset:
    return dataset.subset(balanced_subsample_indices(dataset.groups, dataset.n_groups, seed))


def stratified_halves(groups, n_groups: int, fraction: float, seed: int):
    """Split row indices per group into parts A (``fraction``) and B."""
    groups = np.asarray(groups, dtype=np.int64)
    rng = make_rng(seed, "halves")
    a, b = [], []
    for g in range(n_groups):
        idx = rng.permutation(np.flatnonzero(groups == g))
        k = int(np.floor(idx.size * fraction))
        k = min(max(k, 1), idx.size - 1)
        if idx.size < 2:
            raise ValueError(f"group {g} has {idx.size} rows; cannot appear in both tuning halves")
        a.append(idx[:k])
        b.append(idx[k:])
    return np.sort(np.concatenate(a)), np.sort(np.concatenate(b))


def class_weight_candidates(n_classes: int, grid: Sequence[float]) -> List[Tuple[float, ...]]:
    """One class at weight ``w`` for each ``w`` in ``grid``, all others at 1.

    For two classes this is "fix class 0 at 1, sweep class 1; then swap".
    For more classes every class is swept in turn against the rest.
    """
    out = [tuple([1.0] * n_classes)]
    for c in range(n_classes - 1, -1, -1) if n_classes == 2 else range(n_classes):
        for w in grid:
            if w == 1.0:
                continue
            cw = [1.0] * n_classes
            cw[c] = float(w)
            out.append(tuple(cw))
    return out


def _fit_subsample(data: EmbeddingDataset, scaler: Scaler, seed: int, solver: SolverConfig):
    idx = balanced_subsample_indices(data.groups, data.n_groups, seed)
    X = scaler.transform(data.features[idx].astype(np.float64))
    head = fit_logreg(X, data.labels[idx], solver, scaler=scaler, n_classes=data.n_classes)
    return head, idx.size


def fit_reweighted_head(reweight: EmbeddingDataset, config: DfrConfig, C: float,
                        class_weights=None, seeds: Optional[Sequence[int]] = None):
    """Scaler on the full set, ``n_retrains`` subsampled fits, averaged.

    Returns ``(head, seeds, subset_sizes)``.  Passing the recorded ``seeds``
    replays a previous run exactly.
    """
    if seeds is None:
        seeds = [derive_seed(config.seed, "retrain", k) for k in range(config.n_retrains)]
    scaler = Scaler().fit(reweight.features.astype(np.float64))
    solver = config.solver(C, class_weights)
    heads, sizes = [], []
    for s in seeds:
        h, size = _fit_subsample(reweight, scaler, s, solver)
        heads.append(h)
        sizes.append(size)
    avg = average_weights(heads)
    avg.info["converged_all"] = all(h.info["converged"] for h in heads)
    return avg, [int(s) for s in seeds], sizes


def _wga(head: LinearHead, data: EmbeddingDataset) -> float:
    return evaluate(predict_labels(head, data.features), data.labels, data.groups,
                    data.n_groups).worst_group_accuracy


def _candidates(config: DfrConfig, n_classes: int):
    weights = ([None] if config.variant == "val_tr"
               else class_weight_candidates(n_classes, config.class_weight_grid))
    # smaller C first so that ties resolve toward stronger regularization
    return [(C, cw) for C in sorted(set(config.c_grid)) for cw in weights]


def tune(reweight: EmbeddingDataset, config: DfrConfig,
         validation: Optional[EmbeddingDataset] = None):
    """Choose ``C`` (and class weights) by worst-group accuracy.

    Without ``validation`` the reweighting set is split per group into a
    fitting part and an evaluation part (``val_tr``).  With it, heads are
    fit on ``reweight`` and scored on ``validation`` (``tr_tr``/``tr_nm``).
    One fit per candidate on a shared subsample; ties go to the smaller
    ``C``, then to the earlier class-weight candidate.

    Returns ``(chosen_C, chosen_class_weights, table)``.
    """
    cands = _candidates(config, reweight.n_classes)
    if len(cands) == 1:
        C, cw = cands[0]
        return C, cw, []
    if validation is None:
        a, b = stratified_halves(reweight.groups, reweight.n_groups,
                                 config.tuning_split_fraction,
                                 derive_seed(config.seed, "tune_split"))
        fit_part, eval_part = reweight.subset(a), reweight.subset(b)
    else:
        fit_part, eval_part = reweight, validation
    scaler = Scaler().fit(fit_part.features.astype(np.float64))
    sub_seed = derive_seed(config.seed, "tune_subsample")
    table = []
    best = None
    for C, cw in cands:
        head, _ = _fit_subsample(fit_part, scaler, sub_seed, config.solver(C, cw))
        wga = _wga(head, eval_part)
        table.append({"C": C, "class_weights": None if cw is None else list(cw),
                      "worst_group_accuracy": wga})
        if best is None or wga > best[0]:
            best = (wga, C, cw)
    return best[1], best[2], table


def run_dfr(embeddings_train: Optional[EmbeddingDataset], embeddings_reweight: EmbeddingDataset,
            embeddings_test: Optional[EmbeddingDataset], schema: Optional[GroupSchema],
            config: DfrConfig = DfrConfig()) -> DfrResult:
    """Tune, retrain on group-balanced subsets, average, evaluate.

    ``val_tr``: the head is trained on ``embeddings_reweight`` (held-out
    data), tuned on its two halves.  ``tr_tr`` and ``tr_nm``: the head is
    trained on ``embeddings_train`` and tuned against
    ``embeddings_reweight`` as validation; ``tr_nm`` differs only in the
    extractor that produced the embeddings (trained without minority
    groups), which is the caller's business.
    """
    if config.variant == "val_tr":
        head_data, validation = embeddings_reweight, None
    else:
        if embeddings_train is None:
            raise ValueError(f"variant {config.variant} needs training embeddings")
        head_data, validation = embeddings_train, embeddings_reweight
    for ds in (embeddings_train, embeddings_reweight, embeddings_test):
        if ds is None:
            continue
        if (ds.d, ds.n_classes, ds.n_groups) != (head_data.d, head_data.n_classes,
                                                 head_data.n_groups):
            raise ValueError("datasets disagree on feature width, class or group count")
    head_data.check()

    C, cw, table = tune(head_data, config, validation)
    head, seeds, sizes = fit_reweighted_head(head_data, config, C, cw)

    metrics = None
    if embeddings_test is not None:
        if schema is not None:
            train_counts = schema.train_counts
        elif embeddings_train is not None:
            train_counts = embeddings_train.group_counts()
        else:
            train_counts = None
        metrics = evaluate(predict_labels(head, embeddings_test.features), embeddings_test.labels,
                           embeddings_test.groups, embeddings_test.n_groups, train_counts)
    provenance = {
        "retrain_seed_rule": "derive_seed(seed, 'retrain', k)",
        "scaler": "fit once on the full reweighting set",
        "tuning": "single fit per grid point on a shared subsample",
        "lambda_scaling": config.lambda_scaling,
        "lambda_rule": "1/(C*n)" if config.lambda_scaling == "per_sample" else "1/C",
        "head_data_rows": head_data.n,
        "converged_all": head.info.get("converged_all"),
    }
    return DfrResult(head, C, cw, seeds, sizes, table, metrics, config, provenance)


def _inverse_frequency(labels, n_values: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=n_values).astype(np.float64)
    present = counts > 0
    w = np.zeros_like(counts)
    w[present] = labels.size / (present.sum() * counts[present])
    return w[labels]


def _weighted_fit(data: EmbeddingDataset, sample_weight, solver: SolverConfig) -> LinearHead:
    scaler = Scaler().fit(data.features.astype(np.float64))
    return fit_logreg(scaler.transform(data.features.astype(np.float64)), data.labels, solver,
                      scaler=scaler, n_classes=data.n_classes, sample_weight=sample_weight)


BASELINE_SOLVER = SolverConfig(penalty="l2", C=1.0, max_iter=5000, tol=1e-6)


def crt_baseline(embeddings_train: EmbeddingDataset,
                 solver: SolverConfig = BASELINE_SOLVER) -> LinearHead:
    """Classifier re-training with class-balanced sampling.

    Sampling a class uniformly and then an example from it is, in
    expectation, the full-batch objective with per-example weight
    ``n / (C * count[class])``, which is what is minimized here.
    """
    counts = np.bincount(embeddings_train.labels, minlength=embeddings_train.n_classes)
    if embeddings_train.n_classes < 2:
        raise ValueError("cRT needs at least two classes")
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise ValueError(f"class {int(missing[0])} has no rows; cRT needs every class")
    w = _inverse_frequency(embeddings_train.labels, embeddings_train.n_classes)
    return _weighted_fit(embeddings_train, w, solver)


def group_balanced_sampling_retrain(embeddings: EmbeddingDataset,
                                    solver: SolverConfig = BASELINE_SOLVER) -> LinearHead:
    """Last-layer retraining where each draw picks a group uniformly first.

    Realized as per-example weights ``n / (G * count[group])`` on all rows;
    nothing is subsampled.
    """
    counts = embeddings.group_counts()
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ValueError(f"group {int(empty[0])} has no rows")
    w = _inverse_frequency(embeddings.groups, embeddings.n_groups)
    return _weighted_fit(embeddings, w, solver)


def lws_baseline(frozen_head: LinearHead, embeddings: EmbeddingDataset, max_iter: int = 500):
    """Learnable weight scaling: fit one scale per class row of a frozen head.

    Logits become ``f_c * (w_c . x) + b_c``; only ``f`` is optimized, on
    the class-balanced cross-entropy, starting from ``f = 1``.  Returns
    ``(f, rescaled_head)``.
    """
    X = frozen_head.scaler.transform(embeddings.features.astype(np.float64))
    y = embeddings.labels
    C = frozen_head.n_classes
    base = X @ frozen_head.W.T
    s = _inverse_frequency(y, C)
    n = y.size
    rows = np.arange(n)

    def fun(f):
        Z = base * f + frozen_head.b
        m = Z.max(axis=1, keepdims=True)
        E = np.exp(Z - m)
        tot = E.sum(axis=1, keepdims=True)
        loss = np.dot(s, m[:, 0] + np.log(tot[:, 0]) - Z[rows, y]) / n
        R = E / tot
        R[rows, y] -= 1.0
        grad = ((R * (s / n)[:, None]) * base).sum(axis=0)
        return loss, grad

    f0 = np.ones(C)
    if max_iter > 0:
        res = minimize(fun, f0, jac=True, method="L-BFGS-B", options={"maxiter": max_iter})
        f = res.x
    else:
        f = f0
    head = LinearHead(frozen_head.W * f[:, None], frozen_head.b.copy(), frozen_head.scaler,
                      {"lws_scales": f.tolist()})
    return f, head


class DFRClassifier(ClassifierMixin, BaseEstimator):
    """Deep feature reweighting head as a scikit-learn classifier.

    ``fit(X, y, groups)`` takes frozen embeddings of a reweighting set with
    integer group labels.  When ``c_grid`` holds several values, ``C`` is
    tuned on two group-stratified halves before the final averaged fit.
    """

    def __init__(self, n_retrains=10, c_grid=DEFAULT_C_GRID, penalty="l1",
                 tuning_split_fraction=0.5, max_iter=5000, tol=1e-6, random_state=0):
        self.n_retrains = n_retrains
        self.c_grid = c_grid
        self.penalty = penalty
        self.tuning_split_fraction = tuning_split_fraction
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y, groups):
        X, y = check_X_y(X, y, dtype=np.float64)
        groups = np.asarray(groups, dtype=np.int64)
        if groups.shape != y.shape:
            raise ValueError("groups must have one entry per row")
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        n_groups = int(groups.max()) + 1
        data = EmbeddingDataset(X, y_enc, groups, len(self.classes_), n_groups)
        cfg = DfrConfig(variant="val_tr", n_retrains=self.n_retrains, c_grid=tuple(self.c_grid),
                        tuning_split_fraction=self.tuning_split_fraction, penalty=self.penalty,
                        seed=int(self.random_state), max_iter=self.max_iter, tol=self.tol)
        self.result_ = run_dfr(None, data, None, None, cfg)
        self.head_ = self.result_.head
        self.C_ = self.result_.chosen_C
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "head_")
        return self.head_.logits(check_array(X, dtype=np.float64))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def predict_proba(self, X):
        check_is_fitted(self, "head_")
        return self.head_.predict_proba(check_array(X, dtype=np.float64))
