"""Deterministic numeric kernels shared by every other module.

Matrices are plain 2-D ``float64`` numpy arrays. Columns are examples
(features x batch), so a batch of ``b`` feature vectors of width ``d`` is a
``d x b`` array.
"""

from __future__ import annotations

import zlib
from typing import Callable

import numpy as np

EPS = 1e-12
INIT_STRATEGIES = ("fan_in_uniform", "he", "orthogonal")


class SeededRng:
    """Seeded generator built on PCG64 (numpy's documented 128-bit LCG + XSL-RR).

    Sub-streams are derived by name, so independent consumers (network init,
    shuffling, projector init) never perturb each other's draws.
    """

    def __init__(self, seed: int, _spawn_key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._spawn_key = tuple(_spawn_key)
        seq = np.random.SeedSequence(self.seed, spawn_key=self._spawn_key)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def derive(self, name: str) -> "SeededRng":
        return SeededRng(self.seed, self._spawn_key + (zlib.crc32(name.encode()),))

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(size=shape) * std

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integer(self, high: int = 2**31 - 1) -> int:
        return int(self._gen.integers(0, high))


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def l2_normalize_columns(x: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Scale each column to unit L2 norm; columns shorter than ``eps`` are divided by ``eps``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    norms = np.sqrt(np.sum(x * x, axis=0, keepdims=True))
    return x / np.maximum(norms, eps)


def softmax_temp(logits: np.ndarray, mu: float = 1.0) -> np.ndarray:
    """Temperature softmax along axis 0 (a vector, or each column of a matrix)."""
    if not mu > 0:
        raise ValueError(f"temperature must be positive, got {mu}")
    z = np.asarray(logits, dtype=np.float64) / mu
    z = z - np.max(z, axis=0, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=0, keepdims=True)


def log_softmax_temp(logits: np.ndarray, mu: float = 1.0) -> np.ndarray:
    if not mu > 0:
        raise ValueError(f"temperature must be positive, got {mu}")
    z = np.asarray(logits, dtype=np.float64) / mu
    z = z - np.max(z, axis=0, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=0, keepdims=True))


def init_matrix(rows: int, cols: int, strategy: str, rng: SeededRng) -> np.ndarray:
    """Draw a ``rows x cols`` weight matrix; ``cols`` is the fan-in.

    fan_in_uniform: U(-1/sqrt(cols), 1/sqrt(cols)), the default for torch Linear.
    he:             N(0, 2/cols).
    orthogonal:     QR of a square Gaussian of side max(rows, cols), sign-fixed
                    so diag(R) > 0, then truncated.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"matrix dims must be >= 1, got {rows}x{cols}")
    if strategy == "fan_in_uniform":
        bound = 1.0 / np.sqrt(cols)
        return rng.uniform(-bound, bound, (rows, cols))
    if strategy == "he":
        return rng.normal((rows, cols), std=np.sqrt(2.0 / cols))
    if strategy == "orthogonal":
        n = max(rows, cols)
        q, r = np.linalg.qr(rng.normal((n, n)))
        signs = np.sign(np.diag(r))
        signs[signs == 0] = 1.0
        q = q * signs
        return np.ascontiguousarray(q[:rows, :cols])
    raise ValueError(f"unknown init strategy {strategy!r}; expected one of {INIT_STRATEGIES}")


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one entry at a time."""
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value while probing entry {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max-norm relative error ``|a-b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), floor)
    return float(np.max(np.abs(a - b), initial=0.0) / scale)
