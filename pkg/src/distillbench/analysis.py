"""Representation similarity, calibration and projector-affinity diagnostics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numkit import EPS, softmax_temp


class DegenerateInputError(ValueError):
    """Raised when a similarity index is undefined for the given features."""


def _center_columns(X: np.ndarray) -> np.ndarray:
    return X - X.mean(axis=1, keepdims=True)


def linear_cka(S: np.ndarray, T: np.ndarray) -> float:
    """Linear CKA between two feature sets whose columns are the same examples."""
    if S.shape[1] != T.shape[1]:
        raise ValueError(f"feature sets cover different example counts: {S.shape[1]} vs {T.shape[1]}")
    if S.shape[1] < 3:
        raise ValueError("CKA needs at least 3 examples")
    Sc, Tc = _center_columns(S), _center_columns(T)
    cross = np.linalg.norm(Tc @ Sc.T) ** 2
    denom = np.linalg.norm(Sc @ Sc.T) * np.linalg.norm(Tc @ Tc.T)
    if denom == 0.0:
        raise DegenerateInputError("constant features: linear CKA undefined")
    return float(cross / denom)


def _sq_dists(X: np.ndarray) -> np.ndarray:
    sq = np.sum(X * X, axis=0)
    D = sq[:, None] + sq[None, :] - 2.0 * (X.T @ X)
    np.fill_diagonal(D, 0.0)
    return np.maximum(D, 0.0)


def rbf_gram(X: np.ndarray, bandwidth_fraction: float = 0.5) -> np.ndarray:
    """Gaussian Gram matrix with sigma = fraction x median pairwise distance."""
    if not bandwidth_fraction > 0:
        raise ValueError("bandwidth_fraction must be positive")
    D2 = _sq_dists(X)
    iu = np.triu_indices(X.shape[1], k=1)
    med = float(np.median(np.sqrt(D2[iu])))
    if med == 0.0:
        raise DegenerateInputError("median pairwise distance is zero: RBF CKA undefined")
    sigma = bandwidth_fraction * med
    return np.exp(-D2 / (2.0 * sigma * sigma))


def hsic(K: np.ndarray, L: np.ndarray) -> float:
    """Biased HSIC estimate ``tr(K H L H) / (b-1)^2``."""
    b = K.shape[0]
    H = np.eye(b) - np.full((b, b), 1.0 / b)
    return float(np.trace(K @ H @ L @ H) / (b - 1) ** 2)


def rbf_cka(S: np.ndarray, T: np.ndarray, bandwidth_fraction: float = 0.5) -> float:
    if S.shape[1] != T.shape[1]:
        raise ValueError(f"feature sets cover different example counts: {S.shape[1]} vs {T.shape[1]}")
    if S.shape[1] < 3:
        raise ValueError("CKA needs at least 3 examples")
    K = rbf_gram(S, bandwidth_fraction)
    L = rbf_gram(T, bandwidth_fraction)
    denom = np.sqrt(hsic(K, K) * hsic(L, L))
    if denom == 0.0:
        raise DegenerateInputError("zero HSIC self-similarity: RBF CKA undefined")
    return float(hsic(K, L) / denom)


@dataclass
class CkaReport:
    kind: str
    values: list[tuple[int, float]] = field(default_factory=list)
    bandwidth_fraction: float | None = None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "cka"])
            for epoch, v in self.values:
                w.writerow([epoch, repr(v)])


# -- calibration -------------------------------------------------------------

@dataclass
class CalibrationBin:
    lo: float
    hi: float
    count: int
    accuracy: float
    confidence: float


@dataclass
class CalibrationReport:
    bin_count: int
    bins: list[CalibrationBin]
    ece: float
    n: int

    def recompute_ece(self) -> float:
        ece = 0.0
        for b in self.bins:
            if b.count:
                ece += b.count / self.n * abs(b.accuracy - b.confidence)
        return ece

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "count", "accuracy", "confidence"])
            for b in self.bins:
                w.writerow([repr(b.lo), repr(b.hi), b.count, repr(b.accuracy), repr(b.confidence)])


def bin_index(conf: np.ndarray, n_bins: int) -> np.ndarray:
    """Bin ``i`` holds confidences in ``(i/l, (i+1)/l]``."""
    upper = np.arange(1, n_bins + 1) / n_bins
    return np.minimum(np.searchsorted(upper, conf, side="left"), n_bins - 1)


def calibration_from_probs(probs: np.ndarray, labels, n_bins: int = 15) -> CalibrationReport:
    """Expected calibration error over equal-width confidence bins.

    ``probs`` is ``c x n`` (columns are samples).
    """
    if n_bins < 1:
        raise ValueError("need at least one bin")
    labels = np.asarray(labels)
    n = probs.shape[1]
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    conf = probs.max(axis=0)
    correct = (probs.argmax(axis=0) == labels).astype(np.float64)
    idx = bin_index(conf, n_bins)
    bins = []
    for i in range(n_bins):
        members = idx == i
        count = int(members.sum())
        acc = float(correct[members].sum() / count) if count else 0.0
        con = float(conf[members].sum() / count) if count else 0.0
        bins.append(CalibrationBin(i / n_bins, (i + 1) / n_bins, count, acc, con))
    report = CalibrationReport(n_bins, bins, 0.0, n)
    report.ece = report.recompute_ece()
    return report


def calibration(logits: np.ndarray, labels, n_bins: int = 15) -> CalibrationReport:
    return calibration_from_probs(softmax_temp(logits), labels, n_bins)


# -- per-class projector affinity -----------------------------------------

@dataclass
class AffinityTable:
    rows: list[list[tuple[int, float]]]
    top_n: int

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["projector", "rank", "label", "mean_cosine"])
            for k, ranked in enumerate(self.rows):
                for r, (label, sim) in enumerate(ranked):
                    w.writerow([k, r, label, repr(sim)])


def column_cosines(G: np.ndarray, T: np.ndarray, eps: float = EPS) -> np.ndarray:
    gn = np.maximum(np.sqrt(np.sum(G * G, axis=0)), eps)
    tn = np.maximum(np.sqrt(np.sum(T * T, axis=0)), eps)
    return np.sum(G * T, axis=0) / (gn * tn)


def class_affinity(member_outputs: list[np.ndarray], T: np.ndarray, labels, top_n: int = 2) -> AffinityTable:
    """Per projector, the classes whose samples it maps closest to the teacher."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    rows = []
    for G in member_outputs:
        cos = column_cosines(G, T)
        means = [(int(y), float(cos[labels == y].mean())) for y in classes]
        means.sort(key=lambda t: (-t[1], t[0]))
        rows.append(means[:top_n])
    return AffinityTable(rows, top_n)


def write_csv(path: Path | str, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
