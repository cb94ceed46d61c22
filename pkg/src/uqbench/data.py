"""Datasets and the manipulations that move ground-truth uncertainty.

Every manipulation returns a new ``Dataset`` whose ``provenance`` gains one
record, so a run's input can be rebuilt from its seeds alone.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import DomainError

WINE_FEATURES = 13
WINE_CLASSES = 3


class SchemaError(ValueError):
    """Input file has the wrong shape (column count, class set, ...)."""


class ParseError(ValueError):
    """A row could not be parsed; carries the 1-based row number."""

    def __init__(self, row: int, message: str):
        self.row = row
        super().__init__(f"row {row}: {message}")


def _rng(seed_or_rng) -> tuple[np.random.Generator, int | None]:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng, None
    return np.random.default_rng(seed_or_rng), seed_or_rng


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    provenance: tuple = ()
    # row ids into the source the dataset was derived from
    index: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        x = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or len(x) != len(y):
            raise ValueError(f"features {x.shape} and labels {y.shape} disagree")
        if len(y) and (y.min() < 0 or y.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        if self.index is None:
            object.__setattr__(self, "index", np.arange(len(y)))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def take(self, rows: np.ndarray, record: dict | None = None) -> "Dataset":
        prov = self.provenance + ((record,) if record else ())
        return Dataset(self.features[rows], self.labels[rows], self.class_count, prov, self.index[rows])

    def to_csv(self, path: str | Path) -> None:
        """Feature columns then the label, with a header row."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"x{i}" for i in range(self.n_features)] + ["label"])
            for row, label in zip(self.features, self.labels):
                w.writerow([repr(float(v)) for v in row] + [int(label)])


@dataclass(frozen=True)
class Split:
    train: Dataset
    test: Dataset


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


def two_moons(n: int, noise_sd: float = 0.1, rng=0) -> Dataset:
    """Two interleaved unit half circles centred at (0, 0) and (1, 0.5).

    Angles are uniform on [0, pi]; isotropic Gaussian noise of ``noise_sd`` is
    added to both coordinates. Class 0 gets ``ceil(n/2)`` points.
    """
    if n < 2 or noise_sd < 0:
        raise ValueError("need n >= 2 and noise_sd >= 0")
    gen, seed = _rng(rng)
    n0 = (n + 1) // 2
    n1 = n - n0
    t0 = gen.uniform(0.0, np.pi, n0)
    t1 = gen.uniform(0.0, np.pi, n1)
    upper = np.column_stack([np.cos(t0), np.sin(t0)])
    lower = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    x = np.vstack([upper, lower])
    if noise_sd:
        x = x + gen.normal(0.0, noise_sd, x.shape)
    y = np.r_[np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)]
    order = gen.permutation(n)
    return Dataset(x[order], y[order], 2, ({"op": "two_moons", "n": n, "noise_sd": noise_sd, "seed": seed},))


MOON_CENTRES = np.array([[0.0, 0.0], [1.0, 0.5]])


def triangles(n: int, rng=0) -> Dataset:
    """Two classes whose overlap widens linearly along x in [0, 1].

    Class 0 draws y uniformly on [-x, 1], class 1 on [-1, x]. At x = 0 the
    classes sit on either side of y = 0; the shared wedge [-x, x] grows until
    the two conditionals coincide at x = 1.
    """
    if n < 2:
        raise ValueError("need n >= 2")
    gen, seed = _rng(rng)
    n0 = (n + 1) // 2
    y = np.r_[np.zeros(n0, dtype=np.int64), np.ones(n - n0, dtype=np.int64)]
    xs = gen.uniform(0.0, 1.0, n)
    u = gen.uniform(0.0, 1.0, n)
    lo = np.where(y == 0, -xs, -1.0)
    hi = np.where(y == 0, 1.0, xs)
    ys = lo + u * (hi - lo)
    order = gen.permutation(n)
    return Dataset(np.column_stack([xs, ys])[order], y[order], 2, ({"op": "triangles", "n": n, "seed": seed},))


# ---------------------------------------------------------------------------
# Wine
# ---------------------------------------------------------------------------


def read_wine_csv(path: str | Path) -> Dataset:
    """UCI layout: no header, class label (1..3) first, then 13 features."""
    path = Path(path)
    if not path.is_file():
        raise SchemaError(f"wine CSV not found: {path}")
    rows, labels = [], []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != WINE_FEATURES + 1:
                raise SchemaError(f"{path}: row {i} has {len(row)} columns, expected {WINE_FEATURES + 1}")
            try:
                label = int(float(row[0]))
                values = [float(c) for c in row[1:]]
            except ValueError as exc:
                raise ParseError(i, str(exc)) from None
            if not all(math.isfinite(v) for v in values):
                raise ParseError(i, "non-finite feature value")
            if not 1 <= label <= WINE_CLASSES:
                raise ParseError(i, f"class label {label} outside 1..{WINE_CLASSES}")
            rows.append(values)
            labels.append(label - 1)
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    y = np.array(labels)
    if len(np.unique(y)) != WINE_CLASSES:
        raise SchemaError(f"{path}: expected {WINE_CLASSES} classes, found {sorted(set(labels))}")
    return Dataset(np.array(rows), y, WINE_CLASSES, ({"op": "read_wine", "path": path.name},))


def stratified_split(ds: Dataset, test_fraction: float, rng=0) -> Split:
    gen, seed = _rng(rng)
    test_rows = []
    for c in range(ds.class_count):
        rows = np.flatnonzero(ds.labels == c)
        k = int(math.floor(test_fraction * len(rows) + 0.5))
        test_rows.append(gen.permutation(rows)[:k])
    test = np.sort(np.concatenate(test_rows))
    train = np.setdiff1d(np.arange(len(ds)), test)
    rec = {"op": "split", "test_fraction": test_fraction, "seed": seed}
    return Split(ds.take(train, dict(rec, part="train")), ds.take(test, dict(rec, part="test")))


def zscore(split: Split) -> Split:
    """Standardise both parts with mean/sd fitted on the training part."""
    mean = split.train.features.mean(axis=0)
    sd = split.train.features.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)

    def apply(d: Dataset) -> Dataset:
        return replace(d, features=(d.features - mean) / sd, provenance=d.provenance + ({"op": "zscore"},))

    return Split(apply(split.train), apply(split.test))


def load_wine(path: str | Path, rng=0, test_fraction: float = 0.2) -> Split:
    """Stratified 80/20 split of the UCI Wine CSV, z-scored on the train part."""
    return zscore(stratified_split(read_wine_csv(path), test_fraction, rng))


def export_uci_wine(path: str | Path) -> Path:
    """Write scikit-learn's bundled copy of UCI Wine in the UCI CSV layout."""
    from sklearn.datasets import load_wine as _sk_wine

    bunch = _sk_wine()
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for label, row in zip(bunch.target, bunch.data):
            w.writerow([int(label) + 1] + [repr(float(v)) for v in row])
    return path


# ---------------------------------------------------------------------------
# Manipulations
# ---------------------------------------------------------------------------


def stratified_subsample(ds: Dataset, fraction: float, rng=0) -> Dataset:
    """Keep ``round(fraction * n_c)`` rows (at least one) of every class ``c``."""
    if not 0.0 < fraction <= 1.0:
        raise DomainError("fraction must lie in (0, 1]")
    gen, seed = _rng(rng)
    record = {"op": "subsample", "fraction": fraction, "seed": seed}
    if fraction == 1.0:
        return ds.take(np.arange(len(ds)), record)
    keep = []
    for c in range(ds.class_count):
        rows = np.flatnonzero(ds.labels == c)
        if len(rows) == 0:
            continue
        k = max(1, int(math.floor(fraction * len(rows) + 0.5)))
        keep.append(gen.choice(rows, size=k, replace=False))
    return ds.take(np.sort(np.concatenate(keep)), record)


def shuffle_labels(ds: Dataset, fraction: float, rng=0) -> Dataset:
    """Permute the labels of a uniformly chosen ``round(fraction * n)`` rows.

    Features are untouched and the label histogram is preserved exactly.
    """
    if not 0.0 <= fraction <= 1.0:
        raise DomainError("fraction must lie in [0, 1]")
    gen, seed = _rng(rng)
    k = int(math.floor(fraction * len(ds) + 0.5))
    labels = ds.labels.copy()
    if k:
        rows = gen.choice(len(ds), size=k, replace=False)
        labels[rows] = labels[gen.permutation(rows)]
    return Dataset(
        ds.features,
        labels,
        ds.class_count,
        ds.provenance + ({"op": "shuffle_labels", "fraction": fraction, "seed": seed},),
        ds.index,
    )


def leave_one_class_out(split: Split, excluded: int) -> tuple[Dataset, Dataset, np.ndarray]:
    """Drop ``excluded`` from training and re-index the remaining labels.

    Returns ``(train_id, test_all, ood_mask)``. ``test_all`` keeps every row
    and its original labels; ``ood_mask`` flags rows of the excluded class.
    Use ``id_label_map`` to translate in-distribution test labels.
    """
    c = split.train.class_count
    if not 0 <= excluded < c:
        raise DomainError(f"class {excluded} outside [0, {c})")
    if not np.any(split.train.labels == excluded) and not np.any(split.test.labels == excluded):
        raise DomainError(f"class {excluded} is absent")
    mapping = id_label_map(c, excluded)
    keep = np.flatnonzero(split.train.labels != excluded)
    train = split.train.take(keep)
    train_id = Dataset(
        train.features,
        mapping[train.labels],
        c - 1,
        train.provenance + ({"op": "leave_one_class_out", "excluded": excluded},),
        train.index,
    )
    ood_mask = split.test.labels == excluded
    return train_id, split.test, ood_mask


def id_label_map(class_count: int, excluded: int) -> np.ndarray:
    """Old label -> contiguous new label; the excluded class maps to -1."""
    mapping = np.full(class_count, -1, dtype=np.int64)
    kept = [k for k in range(class_count) if k != excluded]
    mapping[kept] = np.arange(len(kept))
    return mapping
