"""Synthetic and tabular classification data, stored column-per-sample."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numkit import SeededRng


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray  # d0 x n
    labels: np.ndarray  # n ints in [0, c)
    n_classes: int
    tag: str = ""

    def __post_init__(self):
        if self.X.ndim != 2 or self.X.shape[1] != self.labels.shape[0]:
            raise DataError(f"{self.X.shape[1]} samples but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(f"labels outside [0, {self.n_classes})")

    @property
    def n(self) -> int:
        return self.X.shape[1]

    @property
    def dim(self) -> int:
        return self.X.shape[0]

    @property
    def sparse(self) -> bool:
        """True when some declared class has no samples."""
        return np.unique(self.labels).size < self.n_classes

    def subset(self, idx: np.ndarray, tag: str | None = None) -> "Dataset":
        return Dataset(self.X[:, idx], self.labels[idx], self.n_classes, self.tag if tag is None else tag)


def gen_gaussian_mixture(classes: int, dim: int, per_class: int, spread: float, seed: int,
                         modes: int = 1) -> Dataset:
    """Means drawn uniformly on the unit sphere; samples ``mean + spread * N(0, I)``.

    With ``modes > 1`` every class owns that many means and its samples are
    dealt to them round-robin, giving non-convex class regions.
    """
    if classes < 1 or dim < 1 or per_class < 1 or modes < 1:
        raise ValueError("classes, dim, per_class and modes must be >= 1")
    if not spread > 0:
        raise ValueError("spread must be positive")
    rng = SeededRng(seed)
    means = rng.derive("means").normal((dim, classes * modes))
    means /= np.linalg.norm(means, axis=0, keepdims=True)
    noise = rng.derive("noise").normal((dim, classes * per_class), std=spread)
    labels = np.repeat(np.arange(classes), per_class)
    centre = labels * modes + np.tile(np.arange(per_class) % modes, classes)
    X = means[:, centre] + noise
    return Dataset(X, labels, classes, "all")


def nearest_mean_accuracy(train: Dataset, test: Dataset) -> float:
    means = np.stack([train.X[:, train.labels == y].mean(axis=1) for y in range(train.n_classes)], axis=1)
    d = np.sum((test.X[:, :, None] - means[:, None, :]) ** 2, axis=0)
    return float(np.mean(d.argmin(axis=1) == test.labels))


def load_csv(path, has_header: bool = False, n_classes: int | None = None) -> Dataset:
    """Rows are samples; the last column is an integer label."""
    rows, labels = [], []
    width = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for rowno, row in enumerate(reader, start=1):
            if has_header and rowno == 1:
                continue
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < 2:
                raise DataError(f"{path}: row {rowno}: need at least one feature and a label")
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DataError(f"{path}: row {rowno}: expected {width} cells, got {len(row)}")
            try:
                feats = [float(cell) for cell in row[:-1]]
            except ValueError as exc:
                raise DataError(f"{path}: row {rowno}: non-numeric feature cell") from exc
            label_txt = row[-1].strip()
            if not label_txt:
                raise DataError(f"{path}: row {rowno}: missing label")
            try:
                label = int(label_txt)
            except ValueError as exc:
                raise DataError(f"{path}: row {rowno}: label {label_txt!r} is not an integer") from exc
            if label < 0:
                raise DataError(f"{path}: row {rowno}: negative label {label}")
            rows.append(feats)
            labels.append(label)
    if not rows:
        raise DataError(f"{path}: no data rows")
    y = np.array(labels, dtype=np.int64)
    c = n_classes if n_classes is not None else int(y.max()) + 1
    return Dataset(np.array(rows, dtype=np.float64).T.copy(), y, c, Path(path).stem)


def save_csv(ds: Dataset, path, header: bool = True) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow([f"x{i}" for i in range(ds.dim)] + ["label"])
        for j in range(ds.n):
            w.writerow([repr(v) for v in ds.X[:, j].tolist()] + [int(ds.labels[j])])


def split(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split; per-class train counts are ``round(fraction * n_class)``, clamped to [1, n_class-1]."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    rng = SeededRng(seed).derive("split")
    train_idx, test_idx = [], []
    for y in np.unique(ds.labels):
        idx = np.flatnonzero(ds.labels == y)
        if idx.size < 2:
            raise DataError(f"class {y} has {idx.size} sample(s); at least 2 needed to split")
        idx = idx[rng.permutation(idx.size)]
        k = min(max(int(round(train_fraction * idx.size)), 1), idx.size - 1)
        train_idx.append(idx[:k])
        test_idx.append(idx[k:])
    tr = np.sort(np.concatenate(train_idx))
    te = np.sort(np.concatenate(test_idx))
    return ds.subset(tr, "train"), ds.subset(te, "test")


def minibatches(n: int, batch_size: int, rng: SeededRng | None = None):
    """Yield index arrays covering ``range(n)``; shuffled when ``rng`` is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
