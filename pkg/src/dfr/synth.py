"""Block-Gaussian spurious-correlation datasets.

Inputs are the concatenation ``[core block | spurious block]``.  The core
block carries the label, the spurious block carries an attribute that on
the training split agrees with the label with probability ``p_corr``.
There are as many attribute values as classes (attribute ``a`` is the one
"associated" with class ``a``), and groups are the (label, attribute)
pairs, ``group = label * A + attribute``.

Class (and attribute) means sit at ``margin`` along orthonormal directions
drawn from the seed; for two classes they sit at ``+/- margin`` along a
single direction.  Noise is isotropic Gaussian.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy import integrate
from scipy.stats import norm

from ._rng import make_rng
from .data import EmbeddingDataset, GroupEntry, GroupSchema

__all__ = [
    "SpuriousSpec",
    "RawDataset",
    "generate",
    "assign_groups",
    "ablate_spurious_block",
    "bayes_core_accuracy",
    "drop_minority",
]


@dataclass(frozen=True)
class SpuriousSpec:
    n_classes: int = 2
    d_core: int = 8
    d_spurious: int = 8
    core_noise_sigma: float = 1.0
    spurious_noise_sigma: float = 0.1
    p_corr: float = 0.95
    n_train: int = 2000
    n_val: int = 400
    n_test: int = 2000
    core_margin: float = 1.5
    spurious_margin: float = 3.0
    core_structure: str = "gaussian"
    val_distribution: str = "balanced"

    def __post_init__(self):
        C = self.n_classes
        if C < 2:
            raise ValueError("need at least 2 classes")
        if not 0.0 <= self.p_corr <= 1.0:
            raise ValueError(f"p_corr must lie in [0, 1], got {self.p_corr}")
        if self.d_core < 1 or self.d_spurious < 1:
            raise ValueError("block dimensions must be >= 1")
        if C > 2 and (self.d_core < C or self.d_spurious < C):
            raise ValueError(f"{C} classes need blocks of dimension >= {C}")
        if self.core_noise_sigma < 0 or self.spurious_noise_sigma < 0:
            raise ValueError("noise levels must be non-negative")
        if self.core_margin <= 0 or self.spurious_margin <= 0:
            raise ValueError("margins must be positive")
        if self.core_structure not in ("gaussian", "xor"):
            raise ValueError(f"unknown core_structure {self.core_structure!r}")
        if self.val_distribution not in ("balanced", "train"):
            raise ValueError(f"unknown val_distribution {self.val_distribution!r}")
        if self.core_structure == "xor" and (C != 2 or self.d_core < 2):
            raise ValueError("xor core needs 2 classes and d_core >= 2")
        floor = C * self.n_attributes
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < floor:
                raise ValueError(f"{name} must be >= {floor}")

    @property
    def n_attributes(self) -> int:
        return self.n_classes

    @property
    def n_groups(self) -> int:
        return self.n_classes * self.n_attributes

    def to_dict(self) -> dict:
        return asdict(self)

    def with_(self, **kw) -> "SpuriousSpec":
        return replace(self, **kw)


@dataclass(frozen=True, eq=False)
class RawDataset:
    inputs: np.ndarray
    labels: np.ndarray
    attributes: np.ndarray
    groups: np.ndarray
    n_classes: int
    n_attributes: int
    d_core: int

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_groups(self) -> int:
        return self.n_classes * self.n_attributes

    @property
    def core(self) -> np.ndarray:
        return self.inputs[:, : self.d_core]

    @property
    def spurious(self) -> np.ndarray:
        return self.inputs[:, self.d_core:]

    def with_inputs(self, inputs) -> "RawDataset":
        return replace(self, inputs=np.asarray(inputs, dtype=np.float64))

    def subset(self, index) -> "RawDataset":
        index = np.asarray(index)
        return replace(self, inputs=self.inputs[index], labels=self.labels[index],
                       attributes=self.attributes[index], groups=self.groups[index])

    def to_embeddings(self) -> EmbeddingDataset:
        return EmbeddingDataset(self.inputs, self.labels, self.groups,
                                self.n_classes, self.n_groups)

    @classmethod
    def from_embeddings(cls, ds: EmbeddingDataset, n_attributes: int, d_core: int) -> "RawDataset":
        groups = ds.groups.astype(np.int64)
        return cls(ds.features.astype(np.float64), ds.labels.copy(), groups % n_attributes,
                   groups, ds.n_classes, n_attributes, d_core)

    def equals(self, other: "RawDataset") -> bool:
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("inputs", "labels", "attributes", "groups")) and (
            (self.n_classes, self.n_attributes, self.d_core)
            == (other.n_classes, other.n_attributes, other.d_core))


def assign_groups(labels, attributes, n_attribute_values: int, n_classes: int | None = None):
    """Group ids ``label * A + attribute`` and a schema counting each group."""
    labels = np.asarray(labels, dtype=np.int64).ravel()
    attributes = np.asarray(attributes, dtype=np.int64).ravel()
    A = int(n_attribute_values)
    if labels.shape != attributes.shape:
        raise ValueError("labels and attributes differ in length")
    bad = (attributes < 0) | (attributes >= A)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise ValueError(f"attribute {int(attributes[k])} at row {k} is not in [0, {A})")
    C = int(n_classes) if n_classes is not None else int(labels.max(initial=-1)) + 1
    groups = labels * A + attributes
    counts = np.bincount(groups, minlength=C * A)
    schema = GroupSchema(
        tuple(GroupEntry(g, g // A, g % A, int(counts[g])) for g in range(C * A)), C * A, C
    )
    return groups, schema


def _directions(rng, k: int, dim: int) -> np.ndarray:
    """``k`` orthonormal rows in R^dim; for k == 2 a single direction and its negation."""
    if k == 2:
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        return np.stack([-v, v])
    q, r = np.linalg.qr(rng.standard_normal((dim, k)))
    q = q * np.sign(np.diag(r))
    return q.T


def _geometry(spec: SpuriousSpec, seed: int):
    rng = make_rng(seed, "geometry")
    core_dirs = _directions(rng, spec.n_classes, spec.d_core)
    sp_dirs = _directions(rng, spec.n_attributes, spec.d_spurious)
    if spec.core_structure == "xor":
        core_dirs = np.eye(spec.d_core)[:2]
    return core_dirs, sp_dirs


def _sample_inputs(rng, spec, labels, attributes, core_dirs, sp_dirs):
    n = labels.shape[0]
    if spec.core_structure == "xor":
        s1 = rng.choice(np.array([-1.0, 1.0]), size=n)
        s2 = np.where(labels == 1, s1, -s1)
        core_mean = spec.core_margin * (np.outer(s1, core_dirs[0]) + np.outer(s2, core_dirs[1]))
    else:
        core_mean = spec.core_margin * core_dirs[labels]
    core = core_mean + spec.core_noise_sigma * rng.standard_normal((n, spec.d_core))
    sp = spec.spurious_margin * sp_dirs[attributes] + spec.spurious_noise_sigma * rng.standard_normal(
        (n, spec.d_spurious))
    return np.hstack([core, sp])


def _train_part(rng, spec, n):
    C = spec.n_classes
    labels = rng.integers(0, C, size=n)
    match = rng.random(n) < spec.p_corr
    # uniform over the C-1 non-matching attribute values
    other = (labels + rng.integers(1, C, size=n)) % C
    attributes = np.where(match, labels, other)
    return labels, attributes


def _balanced_part(rng, spec, n):
    G = spec.n_groups
    groups = rng.permutation(np.arange(n) % G)
    return groups // spec.n_attributes, groups % spec.n_attributes


def generate(spec: SpuriousSpec, seed: int):
    """Return ``(train, val, test)`` RawDatasets.

    Test is always group-balanced (per-group counts differ by at most one).
    Val is too, unless ``val_distribution="train"``, in which case it is
    drawn like the training split (correlated with ``p_corr``).
    """
    core_dirs, sp_dirs = _geometry(spec, seed)
    parts = []
    for name, n in (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)):
        rng = make_rng(seed, "part", name)
        if name == "train" or (name == "val" and spec.val_distribution == "train"):
            labels, attrs = _train_part(rng, spec, n)
        else:
            labels, attrs = _balanced_part(rng, spec, n)
        inputs = _sample_inputs(rng, spec, labels, attrs, core_dirs, sp_dirs)
        groups, _ = assign_groups(labels, attrs, spec.n_attributes, spec.n_classes)
        parts.append(RawDataset(inputs, labels.astype(np.int64), attrs.astype(np.int64),
                                groups, spec.n_classes, spec.n_attributes, spec.d_core))
    return tuple(parts)


def ablate_spurious_block(dataset: RawDataset, mode: str) -> RawDataset:
    """Zero one block: ``"zero_spurious"`` keeps only core, ``"zero_core"`` only spurious."""
    x = np.array(dataset.inputs, dtype=np.float64, copy=True)
    if mode == "zero_spurious":
        x[:, dataset.d_core:] = 0.0
    elif mode == "zero_core":
        x[:, : dataset.d_core] = 0.0
    else:
        raise ValueError(f"unknown ablation mode {mode!r}")
    return dataset.with_inputs(x)


def drop_minority(dataset: RawDataset) -> RawDataset:
    """Rows whose attribute matches the label (the majority groups) only."""
    return dataset.subset(np.flatnonzero(dataset.attributes == dataset.labels))


def bayes_core_accuracy(spec: SpuriousSpec) -> float:
    """Accuracy of the Bayes-optimal classifier that sees only the core block.

    Two Gaussian classes at ``+/- m``: ``Phi(m / s)``.  With ``C``
    orthonormal means the score differences reduce to independent standard
    normals, giving ``int phi(z) Phi(z + m / s)^(C - 1) dz``.  XOR core:
    ``p^2 + (1 - p)^2`` with ``p = Phi(m / s)``.
    """
    m, s, C = spec.core_margin, spec.core_noise_sigma, spec.n_classes
    if s == 0:
        return 1.0
    if spec.core_structure == "xor":
        p = norm.cdf(m / s)
        return float(p * p + (1 - p) ** 2)
    if C == 2:
        return float(norm.cdf(m / s))
    # correct iff m/s + z_y > z_c for every other class
    val, _ = integrate.quad(lambda z: norm.pdf(z) * norm.cdf(z + m / s) ** (C - 1),
                            -np.inf, np.inf, epsabs=1e-12, epsrel=1e-12)
    return float(val)

