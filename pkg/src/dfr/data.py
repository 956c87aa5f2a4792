"""Embedding datasets, group schemas, file formats and splitting."""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._rng import make_rng

__all__ = [
    "EmbeddingDataset",
    "GroupEntry",
    "GroupSchema",
    "DatasetSplit",
    "ValidationReport",
    "EmbeddingFormatError",
    "BadMagicError",
    "MalformedHeaderError",
    "DimensionMismatchError",
    "LabelRangeError",
    "NonFiniteValueError",
    "validate",
    "load_embeddings",
    "save_embeddings",
    "split",
]

MAGIC = b"DFRE"
VERSION = 1
_HEADER = struct.Struct("<4sIQIII")


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class EmbeddingDataset:
    """Feature matrix with per-row class and group labels.

    Features are held as float32, the precision of the binary file format,
    so that a save/load round trip is exact.  The constructor only coerces
    types; use :func:`validate` (or :meth:`check`) to test the invariants.
    """

    features: np.ndarray
    labels: np.ndarray
    groups: np.ndarray
    n_classes: int
    n_groups: int

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float32, copy=True)
        if feats.ndim == 1:
            feats = feats.reshape(-1, 1)
        object.__setattr__(self, "features", _frozen(feats))
        object.__setattr__(self, "labels", _frozen(np.array(self.labels, dtype=np.int64).ravel()))
        object.__setattr__(self, "groups", _frozen(np.array(self.groups, dtype=np.int64).ravel()))
        object.__setattr__(self, "n_classes", int(self.n_classes))
        object.__setattr__(self, "n_groups", int(self.n_groups))

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def d(self) -> int:
        return int(self.features.shape[1]) if self.features.ndim == 2 else 0

    def __len__(self) -> int:
        return self.n

    def subset(self, index) -> "EmbeddingDataset":
        index = np.asarray(index)
        return EmbeddingDataset(
            self.features[index], self.labels[index], self.groups[index],
            self.n_classes, self.n_groups,
        )

    def group_counts(self) -> np.ndarray:
        return np.bincount(self.groups, minlength=self.n_groups)

    def check(self) -> "EmbeddingDataset":
        report = validate(self)
        if not report:
            raise ValueError("invalid dataset: " + "; ".join(report.violations))
        return self

    def equals(self, other: "EmbeddingDataset") -> bool:
        return (
            self.n_classes == other.n_classes
            and self.n_groups == other.n_groups
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.groups, other.groups)
        )


@dataclass(frozen=True)
class GroupEntry:
    group_id: int
    class_label: int
    attribute: int
    train_count: int


@dataclass(frozen=True)
class GroupSchema:
    """Maps group ids to their (class, spurious attribute) pair.

    ``train_count`` records how often each group occurs in the data used
    to train the feature extractor; its normalization gives the mixture
    proportions used for prevalence-weighted accuracy.
    """

    entries: tuple
    n_groups: int
    n_classes: int

    def __post_init__(self):
        entries = tuple(self.entries)
        object.__setattr__(self, "entries", entries)
        ids = [e.group_id for e in entries]
        if sorted(ids) != list(range(self.n_groups)):
            raise ValueError(
                f"group ids must be exactly 0..{self.n_groups - 1}, got {sorted(ids)}"
            )
        for e in entries:
            if e.train_count < 0:
                raise ValueError(f"negative train_count for group {e.group_id}")
            if not 0 <= e.class_label < self.n_classes:
                raise ValueError(f"class label out of range for group {e.group_id}")

    def _by_id(self):
        return sorted(self.entries, key=lambda e: e.group_id)

    @property
    def train_counts(self) -> np.ndarray:
        return np.array([e.train_count for e in self._by_id()], dtype=np.int64)

    @property
    def class_of_group(self) -> np.ndarray:
        return np.array([e.class_label for e in self._by_id()], dtype=np.int64)

    @property
    def proportions(self) -> np.ndarray:
        counts = self.train_counts.astype(np.float64)
        total = counts.sum()
        if total == 0:
            return np.zeros_like(counts)
        return counts / total

    @classmethod
    def from_counts(cls, train_counts: Sequence[int], n_classes: int,
                    n_attributes: int | None = None) -> "GroupSchema":
        """Schema for product groups ``group = label * A + attribute``."""
        G = len(train_counts)
        A = n_attributes if n_attributes is not None else G // n_classes
        if A * n_classes != G:
            raise ValueError(f"{G} groups is not {n_classes} classes x {A} attributes")
        entries = tuple(
            GroupEntry(g, g // A, g % A, int(c)) for g, c in enumerate(train_counts)
        )
        return cls(entries, G, n_classes)

    def to_dict(self) -> dict:
        return {
            "n_groups": self.n_groups,
            "n_classes": self.n_classes,
            "entries": [
                {"group": e.group_id, "class": e.class_label,
                 "attribute": e.attribute, "train_count": e.train_count}
                for e in self._by_id()
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroupSchema":
        entries = tuple(
            GroupEntry(int(e["group"]), int(e["class"]), int(e["attribute"]), int(e["train_count"]))
            for e in d["entries"]
        )
        return cls(entries, int(d["n_groups"]), int(d["n_classes"]))


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    train: EmbeddingDataset
    val: EmbeddingDataset
    test: EmbeddingDataset
    indices: tuple = field(default=())


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def _first(mask: np.ndarray) -> int:
    return int(np.flatnonzero(mask)[0])


def validate(dataset) -> ValidationReport:
    """Check every dataset invariant; violations are returned, never raised."""
    report = ValidationReport()
    v = report.violations
    try:
        feats = np.asarray(dataset.features)
        labels = np.asarray(dataset.labels)
        groups = np.asarray(dataset.groups)
        C = int(dataset.n_classes)
        G = int(dataset.n_groups)
    except Exception as exc:  # arbitrary candidate objects
        v.append(f"malformed dataset: {exc}")
        return report

    if feats.ndim != 2:
        v.append(f"features must be 2-D, got {feats.ndim}-D")
        return report
    n = feats.shape[0]
    if n < 1:
        v.append("dataset is empty")
    if labels.shape != (n,):
        v.append(f"labels length {labels.size} != n={n}")
    if groups.shape != (n,):
        v.append(f"groups length {groups.size} != n={n}")
    if C < 1:
        v.append(f"n_classes must be >= 1, got {C}")
    if G < 1:
        v.append(f"n_groups must be >= 1, got {G}")
    if v:
        return report

    if not np.issubdtype(feats.dtype, np.number):
        v.append("features are not numeric")
        return report
    bad = ~np.isfinite(feats).all(axis=1)
    if bad.any():
        v.append(f"non-finite feature at row {_first(bad)}")
    for name, arr, hi in (("label", labels, C), ("group", groups, G)):
        if not np.issubdtype(arr.dtype, np.integer):
            v.append(f"{name}s are not integers")
            continue
        out = (arr < 0) | (arr >= hi)
        if out.any():
            v.append(f"{name} out of range at row {_first(out)}")
    return report


class EmbeddingFormatError(ValueError):
    """Base class for embedding file parse errors."""


class BadMagicError(EmbeddingFormatError):
    pass


class MalformedHeaderError(EmbeddingFormatError):
    pass


class DimensionMismatchError(EmbeddingFormatError):
    pass


class LabelRangeError(EmbeddingFormatError):
    pass


class NonFiniteValueError(EmbeddingFormatError):
    pass


def _read_binary(path: Path) -> EmbeddingDataset:
    buf = path.read_bytes()
    if len(buf) < _HEADER.size:
        raise MalformedHeaderError(
            f"{path}: truncated header ({len(buf)} bytes, need {_HEADER.size}) at byte 0"
        )
    magic, version, n, d, C, G = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r} at byte 0, expected {MAGIC!r}")
    if version != VERSION:
        raise MalformedHeaderError(f"{path}: unsupported version {version} at byte 4")
    off = _HEADER.size
    expected = off + n * d * 4 + 2 * n * 4
    if len(buf) != expected:
        raise DimensionMismatchError(
            f"{path}: header declares n={n}, d={d} ({expected} bytes) "
            f"but file has {len(buf)} bytes; mismatch at byte {min(len(buf), expected)}"
        )
    feats = np.frombuffer(buf, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    off_labels = off + n * d * 4
    labels = np.frombuffer(buf, dtype="<u4", count=n, offset=off_labels)
    off_groups = off_labels + n * 4
    groups = np.frombuffer(buf, dtype="<u4", count=n, offset=off_groups)

    bad = ~np.isfinite(feats)
    if bad.any():
        k = int(np.flatnonzero(bad.ravel())[0])
        raise NonFiniteValueError(f"{path}: non-finite feature at byte {off + 4 * k} (row {k // d})")
    for name, arr, hi, base in (("label", labels, C, off_labels), ("group", groups, G, off_groups)):
        out = arr >= hi
        if out.any():
            k = _first(out)
            raise LabelRangeError(
                f"{path}: {name} {int(arr[k])} out of range [0, {hi}) at byte {base + 4 * k} (row {k})"
            )
    return EmbeddingDataset(feats, labels, groups, C, G)


def _read_csv(path: Path, n_classes, n_groups) -> EmbeddingDataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedHeaderError(f"{path}: empty file, missing header at line 1")
        d = len(header) - 2
        expected = [f"feat_{j}" for j in range(d)] + ["label", "group"]
        if d < 1 or header != expected:
            raise MalformedHeaderError(
                f"{path}: malformed header at line 1; expected feat_0..feat_{{d-1}},label,group"
            )
        feats, labels, groups = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 2:
                raise DimensionMismatchError(
                    f"{path}: line {lineno} has {len(row)} fields, header declares {d + 2}"
                )
            try:
                x = [float(t) for t in row[:d]]
                lab, grp = int(row[d]), int(row[d + 1])
            except ValueError as exc:
                raise EmbeddingFormatError(f"{path}: unparsable value at line {lineno}: {exc}")
            if not np.all(np.isfinite(x)):
                raise NonFiniteValueError(f"{path}: non-finite feature at line {lineno}")
            feats.append(x)
            labels.append(lab)
            groups.append(grp)
    labels_a = np.array(labels, dtype=np.int64)
    groups_a = np.array(groups, dtype=np.int64)
    C = int(n_classes) if n_classes is not None else int(labels_a.max(initial=-1)) + 1
    G = int(n_groups) if n_groups is not None else int(groups_a.max(initial=-1)) + 1
    for name, arr, hi in (("label", labels_a, C), ("group", groups_a, G)):
        out = (arr < 0) | (arr >= hi)
        if out.any():
            k = _first(out)
            raise LabelRangeError(f"{path}: {name} out of range [0, {hi}) at line {k + 2}")
    feats_a = np.array(feats, dtype=np.float32).reshape(len(feats), d)
    return EmbeddingDataset(feats_a, labels_a, groups_a, C, G)


def _infer_format(path: Path, format: str | None) -> str:
    if format is not None:
        if format not in ("csv", "binary"):
            raise ValueError(f"unknown format {format!r}")
        return format
    return "csv" if path.suffix.lower() == ".csv" else "binary"


def load_embeddings(path, format: str | None = None, n_classes: int | None = None,
                    n_groups: int | None = None) -> EmbeddingDataset:
    """Read an embedding file.

    ``format`` is ``"csv"`` or ``"binary"`` (inferred from the suffix when
    omitted).  The CSV format carries no class/group counts; pass them
    explicitly or they are inferred as ``max + 1``.
    """
    path = Path(path)
    fmt = _infer_format(path, format)
    ds = _read_binary(path) if fmt == "binary" else _read_csv(path, n_classes, n_groups)
    if ds.n < 1:
        raise DimensionMismatchError(f"{path}: file contains no rows")
    return ds


def _to_csv_text(dataset: EmbeddingDataset) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow([f"feat_{j}" for j in range(dataset.d)] + ["label", "group"])
    for x, lab, grp in zip(dataset.features, dataset.labels, dataset.groups):
        w.writerow([format(v, ".9g") for v in x] + [int(lab), int(grp)])
    return out.getvalue()


def _to_bytes(dataset: EmbeddingDataset) -> bytes:
    n, d = dataset.features.shape
    head = _HEADER.pack(MAGIC, VERSION, n, d, dataset.n_classes, dataset.n_groups)
    return b"".join((
        head,
        np.ascontiguousarray(dataset.features, dtype="<f4").tobytes(),
        dataset.labels.astype("<u4").tobytes(),
        dataset.groups.astype("<u4").tobytes(),
    ))


def save_embeddings(dataset: EmbeddingDataset, path, format: str | None = None) -> None:
    path = Path(path)
    dataset.check()
    fmt = _infer_format(path, format)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "binary":
        path.write_bytes(_to_bytes(dataset))
    else:
        path.write_text(_to_csv_text(dataset))


def _largest_remainder(quotas: np.ndarray, total: int, rng) -> np.ndarray:
    base = np.floor(quotas + 1e-9).astype(np.int64)
    short = int(total - base.sum())
    if short > 0:
        frac = quotas - base
        # random tie-breaking among equal remainders
        order = np.lexsort((rng.permutation(len(quotas)), -np.round(frac, 12)))
        base[order[:short]] += 1
    return base


def split(dataset: EmbeddingDataset, fractions: Iterable[float], seed: int,
          stratify: str = "none") -> DatasetSplit:
    """Split into disjoint train/val/test parts.

    With ``stratify="by_group"`` every group is apportioned to the three
    parts in proportion to ``fractions``; rounding surplus goes to train and
    each part receives at least one row of every group.
    """
    fr = np.asarray(tuple(fractions), dtype=np.float64)
    if fr.shape != (3,) or (fr <= 0).any() or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must be 3 positive numbers summing to 1, got {fr.tolist()}")
    if stratify not in ("none", "by_group"):
        raise ValueError(f"unknown stratify mode {stratify!r}")
    rng = make_rng(seed, "split")
    n = dataset.n

    if stratify == "none":
        perm = rng.permutation(n)
        n_val = int(np.floor(n * fr[1]))
        n_test = int(np.floor(n * fr[2]))
        n_train = n - n_val - n_test
        parts = [np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]),
                 np.sort(perm[n_train + n_val:])]
    else:
        counts = dataset.group_counts()
        present = np.flatnonzero(counts)
        for g in present:
            if counts[g] < 3:
                raise ValueError(f"group {g} has {counts[g]} rows, fewer than the 3 parts")
        held = np.floor(counts * (fr[1] + fr[2]) + 1e-9).astype(np.int64)
        share = fr[1] / (fr[1] + fr[2])
        val_q = held * share
        n_val = _largest_remainder(val_q, int(round(val_q.sum())), rng)
        n_test = held - n_val
        for g in present:
            # at least one row per part
            for arr in (n_val, n_test):
                if arr[g] == 0:
                    arr[g] = 1
        n_train = counts - n_val - n_test
        for g in present:
            if n_train[g] < 1:
                raise ValueError(f"group {g} too small for the requested fractions")
        parts = [[], [], []]
        for g in present:
            idx = rng.permutation(np.flatnonzero(dataset.groups == g))
            a, b = n_train[g], n_train[g] + n_val[g]
            parts[0].append(idx[:a])
            parts[1].append(idx[a:b])
            parts[2].append(idx[b:])
        parts = [np.sort(np.concatenate(p)) for p in parts]

    subsets = [dataset.subset(p) for p in parts]
    return DatasetSplit(*subsets, indices=tuple(parts))
