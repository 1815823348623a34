"""Dense float64 matrix helpers and seeded random streams.

Matrices are plain 2-D ``numpy.ndarray`` objects with dtype float64. The
helpers here add shape checking and a fixed accumulation order for the
matrix product so results do not depend on the BLAS build or its threads.
"""
from __future__ import annotations

import hashlib
from typing import Sequence

import numpy as np

Matrix = np.ndarray


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


def as_matrix(values) -> Matrix:
    a = np.array(values, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got {a.ndim} dimensions")
    return a


def zeros(rows: int, cols: int) -> Matrix:
    return np.zeros((rows, cols), dtype=np.float64)


def _matmul_loop(a: Matrix, b: Matrix) -> Matrix:
    out = a[:, 0:1] * b[0:1, :]
    for j in range(1, a.shape[1]):
        out += a[:, j : j + 1] * b[j : j + 1, :]
    return out


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product accumulated strictly left to right over the inner axis.

    For C-contiguous operands numpy's einsum kernel (no BLAS, no threads)
    performs exactly this accumulation, except for single-column products,
    which take the explicit loop. Column ``k`` of the result is therefore the
    same bits whether ``b`` has one column or many.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul operands must be 2-D")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    if a.shape[1] == 0:
        return zeros(a.shape[0], b.shape[1])
    if b.shape[1] == 1:
        return _matmul_loop(a, b)
    return np.einsum("ij,jk->ik", np.ascontiguousarray(a), np.ascontiguousarray(b))


def _check_same(a: Matrix, b: Matrix, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: {a.shape} vs {b.shape}")


def sigmoid(a: Matrix) -> Matrix:
    # Split by sign so exp never overflows.
    out = np.empty_like(a, dtype=np.float64)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def apply_sigmoid(a: Matrix) -> Matrix:
    return sigmoid(np.asarray(a, dtype=np.float64))


def apply_tanh(a: Matrix) -> Matrix:
    return np.tanh(np.asarray(a, dtype=np.float64))


def hadamard(a: Matrix, b: Matrix) -> Matrix:
    _check_same(a, b, "hadamard")
    return a * b


def _stream_key(part) -> int:
    if isinstance(part, (int, np.integer)) and part >= 0:
        return int(part)
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


class SeededRng:
    """Philox4x64-10 counter-based generator behind a numpy ``Generator``.

    ``SeededRng(seed, *stream)`` derives an independent stream for every
    distinct ``stream`` tuple (strings are hashed with SHA-256), so per-client
    and per-round randomness never shares state. Philox output is specified
    bit-for-bit and is identical on every platform.
    """

    algorithm = "philox4x64-10"

    def __init__(self, seed: int, *stream):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.stream = tuple(stream)
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(_stream_key(p) for p in stream))
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *stream) -> "SeededRng":
        return SeededRng(self.seed, *self.stream, *stream)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def binomial(self, n, p, size=None):
        return self._gen.binomial(n, p, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, seq: Sequence, size=None, replace=True, p=None):
        return self._gen.choice(seq, size=size, replace=replace, p=p)


def init_uniform(rows: int, cols: int, scale: float, rng: SeededRng) -> Matrix:
    """Entries uniform in [-scale, scale], drawn in row-major order."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    flat = rng.uniform(-scale, scale, rows * cols)
    return np.asarray(flat, dtype=np.float64).reshape(rows, cols)
