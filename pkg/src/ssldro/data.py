"""Dataset ingestion, random splits and construction of the augmented support set.

A labeled dataset is a predictor matrix ``X`` of shape ``(m, d)`` together with a
label vector ``y``.  Unlabeled data carry ``y = None``.  The support set over
which the adversary may redistribute mass is the labeled data followed by every
unlabeled predictor replicated once with label ``+1`` and once with label ``-1``.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# provenance tags of support points
LABELED = 0
REPLICATED_POSITIVE = 1
REPLICATED_NEGATIVE = 2

_LABEL_TOKENS = {"-1": -1.0, "+1": 1.0, "1": 1.0}


class DataError(ValueError):
    """Malformed or inconsistent input data."""

    def __init__(self, message: str, row: int | None = None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray | None = None

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        if X.shape[1] < 1:
            raise DataError("datasets need at least one feature")
        object.__setattr__(self, "X", X)
        if self.y is not None:
            y = np.asarray(self.y, dtype=float).reshape(-1)
            if y.shape[0] != X.shape[0]:
                raise DataError(f"{X.shape[0]} predictor rows but {y.shape[0]} labels")
            object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def labeled(self) -> bool:
        return self.y is not None

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.X[idx], None if self.y is None else self.y[idx])

    def without_labels(self) -> "Dataset":
        return Dataset(self.X, None)

    def fingerprint(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.X).tobytes())
        if self.y is not None:
            h.update(np.ascontiguousarray(self.y).tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class SupportSet:
    """Atoms available to the adversary, labeled data first."""

    X: np.ndarray
    y: np.ndarray
    origin: np.ndarray
    n_labeled: int
    n_unlabeled: int

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def compatible(self, label: float) -> np.ndarray:
        """Indices of support points carrying ``label``."""
        return np.flatnonzero(self.y == label)


def check_classification_labels(y: np.ndarray) -> None:
    bad = np.flatnonzero((y != 1.0) & (y != -1.0))
    if bad.size:
        raise DataError(f"label {y[bad[0]]!r} is not -1 or +1", row=int(bad[0]))


def _parse_label(token: str, task: str, row: int) -> float:
    token = token.strip()
    if task == "classification":
        if token in _LABEL_TOKENS:
            return _LABEL_TOKENS[token]
        try:
            value = float(token)
        except ValueError:
            raise DataError(f"cannot parse label {token!r}", row=row) from None
        if value not in (1.0, -1.0):
            raise DataError(f"label {token!r} is not -1 or +1", row=row)
        return value
    try:
        return float(token)
    except ValueError:
        raise DataError(f"cannot parse label {token!r}", row=row) from None


def load_csv(
    path,
    has_label: bool = True,
    delimiter: str = ",",
    header: bool = False,
    task: str = "classification",
) -> Dataset:
    """Read a dataset, one example per row with the label (if any) first.

    Row numbers in errors count data rows from 0; a skipped header is not counted.
    """
    if task not in ("classification", "regression"):
        raise ValueError(f"unknown task {task!r}")
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path} does not exist")
    rows, labels = [], []
    width = None
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        if header:
            next(reader, None)
        for i, fields in enumerate(reader):
            if not fields or all(not f.strip() for f in fields):
                continue
            if has_label:
                labels.append(_parse_label(fields[0], task, i))
                fields = fields[1:]
            try:
                values = [float(f) for f in fields]
            except ValueError:
                raise DataError("non-numeric feature field", row=i) from None
            if width is None:
                width = len(values)
                if width < 1:
                    raise DataError("no feature fields", row=i)
            elif len(values) != width:
                raise DataError(f"expected {width} features, found {len(values)}", row=i)
            rows.append(values)
    if not rows:
        raise DataError(f"{path} contains no data rows")
    X = np.array(rows, dtype=float)
    return Dataset(X, np.array(labels) if has_label else None)


def write_csv(path, dataset: Dataset, delimiter: str = ",") -> None:
    """Write ``dataset`` in the format read by :func:`load_csv` (17 significant digits)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter=delimiter)
        for i in range(len(dataset)):
            fields = [repr(float(v)) for v in dataset.X[i]]
            if dataset.y is not None:
                fields.insert(0, repr(float(dataset.y[i])))
            writer.writerow(fields)


def build_support(labeled: Dataset, unlabeled: Dataset | None = None) -> SupportSet:
    if labeled.y is None:
        raise DataError("build_support needs labeled data")
    n = len(labeled)
    if unlabeled is None or len(unlabeled) == 0:
        U = np.empty((0, labeled.d))
    else:
        if unlabeled.d != labeled.d:
            raise DataError(f"dimension mismatch: labeled d={labeled.d}, unlabeled d={unlabeled.d}")
        U = unlabeled.X
    m = U.shape[0]
    X = np.vstack([labeled.X, U, U])
    y = np.concatenate([labeled.y, np.ones(m), -np.ones(m)])
    origin = np.concatenate([
        np.full(n, LABELED), np.full(m, REPLICATED_POSITIVE), np.full(m, REPLICATED_NEGATIVE)
    ])
    return SupportSet(X, y, origin, n, m)


def split(dataset: Dataset, sizes, seed: int):
    """Randomly partition into (labeled, unlabeled, test).

    ``sizes`` holds three fractions (floats summing to at most 1) or three row
    counts (ints).  The unlabeled part has its labels discarded.
    """
    m = len(dataset)
    if m < 3:
        raise DataError("need at least 3 rows to split")
    sizes = tuple(sizes)
    if len(sizes) != 3:
        raise ValueError("sizes must have three entries (labeled, unlabeled, test)")
    if all(isinstance(s, (int, np.integer)) for s in sizes):
        counts = [int(s) for s in sizes]
        if sum(counts) > m:
            raise DataError(f"requested {sum(counts)} rows from a dataset of {m}")
    else:
        fracs = [float(s) for s in sizes]
        if any(f <= 0 for f in fracs):
            raise DataError("split fractions must be positive")
        if sum(fracs) > 1 + 1e-12:
            raise DataError(f"split fractions sum to {sum(fracs)} > 1")
        counts = [int(np.floor(f * m)) for f in fracs]
    if any(c <= 0 for c in counts):
        raise DataError(f"empty partition for sizes {sizes}")
    perm = np.random.default_rng(seed).permutation(m)
    a, b, c = counts
    labeled = dataset.subset(perm[:a])
    unlabeled = dataset.subset(perm[a:a + b]).without_labels()
    test = dataset.subset(perm[a + b:a + b + c])
    return labeled, unlabeled, test


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray = field(repr=False)

    @classmethod
    def fit(cls, *datasets: Dataset) -> "Standardizer":
        X = np.vstack([ds.X for ds in datasets if ds is not None and len(ds)])
        sd = X.std(axis=0)
        # constant columns are left unscaled
        sd[sd == 0] = 1.0
        return cls(X.mean(axis=0), sd)

    def transform(self, ds: Dataset) -> Dataset:
        return Dataset((ds.X - self.mean) / self.scale, ds.y)


def add_intercept(ds: Dataset) -> Dataset:
    return Dataset(np.hstack([ds.X, np.ones((len(ds), 1))]), ds.y)
