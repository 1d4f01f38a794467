"""Dense float64 matrix helpers and the seeded, splittable random stream.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 in C order.
"""
from __future__ import annotations

import zlib
from typing import Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError


def as_matrix(values, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Coerce ``values`` to a finite 2-D float64 array, optionally checking its shape."""
    a = np.array(values, dtype=np.float64, order="C", copy=True)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got array with shape {a.shape}")
    if rows is not None and a.shape[0] != rows or cols is not None and a.shape[1] != cols:
        raise ShapeError(f"expected shape ({rows}, {cols}), got {a.shape}")
    check_finite(a, "matrix")
    return a


def check_finite(a: np.ndarray, what: str = "value") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return check_finite(a @ b, "matmul result")


def frobenius_norm(a: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


def argsort_by_key(values: Sequence[float]) -> np.ndarray:
    """Ascending permutation; equal keys keep their original (lower index first) order."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if np.any(np.isnan(v)):
        raise NonFiniteError("cannot sort values containing NaN")
    return np.argsort(v, kind="stable")


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("rng keys must be non-negative")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


class Rng:
    """Deterministic Philox stream identified by a seed and a path of split keys.

    ``child("teacher")`` and ``child("teacher")`` on equal parents give identical
    streams regardless of how much either parent has been consumed, so parallel
    sweeps stay reproducible per seed.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def child(self, *keys) -> "Rng":
        return Rng(self.seed, self.path + tuple(_key_to_int(k) for k in keys))

    def normal(self, size, mean=0.0, std=1.0) -> np.ndarray:
        return self.generator.normal(mean, std, size=size)

    def uniform(self, size=None, low=0.0, high=1.0):
        return self.generator.uniform(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, n: int, k: int) -> np.ndarray:
        return self.generator.choice(n, size=k, replace=False)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"


def seeded_normal(rng: Rng, rows: int, cols: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    if std == 0:
        # still advance the stream so later draws do not depend on std
        rng.normal((rows, cols))
        return np.full((rows, cols), float(mean))
    return rng.normal((rows, cols), mean, std)
