"""Deterministic dense kernels shared by the model and the saliency code.

Matrices are plain 2-D ``float64`` numpy arrays. ``matmul`` deliberately
avoids BLAS: it accumulates rank-1 updates in a fixed order over the inner
dimension so results are bit-identical to a naive triple loop on every
platform.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

LAYER_NORM_EPS = 1e-6

# tanh-approximate GELU constants
GELU_C = math.sqrt(2.0 / math.pi)
GELU_CUBIC = 0.044715


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def check_finite(m: np.ndarray, name: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite values")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with a fixed left-to-right summation order.

    ``out[i, j] = ((a[i,0]*b[0,j] + a[i,1]*b[1,j]) + ...)``, each product
    rounded before it is added, exactly as a scalar triple loop would do.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for k in range(a.shape[1]):
        out += np.multiply.outer(a[:, k], b[k, :])
    return out


def row_softmax(m, scale: float = 1.0) -> np.ndarray:
    m = as_matrix(m)
    z = scale * m
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def layer_norm(m, eps: float = LAYER_NORM_EPS) -> np.ndarray:
    """Normalize each row to zero mean and unit (population) variance."""
    m = as_matrix(m)
    if m.shape[1] < 2:
        raise ValueError(f"layer_norm needs at least 2 columns, got {m.shape[1]}")
    mu = m.mean(axis=1, keepdims=True)
    centered = m - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    return centered / np.sqrt(var + eps)


def gelu(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    return 0.5 * m * (1.0 + np.tanh(GELU_C * (m + GELU_CUBIC * m**3)))


def silu(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    return m / (1.0 + np.exp(-m))


class Rng:
    """Seeded generator that hands out an independent stream per name.

    Each stream is a PCG64 generator keyed by ``(seed, sha256(name))`` through
    numpy's ``SeedSequence``, so asking for ``"layer0.img.q"`` always yields
    the same numbers regardless of which other streams were drawn first.
    Gaussian draws use the Box-Muller transform on the stream's uniforms.
    """

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)

    def __repr__(self):
        return f"Rng(seed={self.seed})"

    def _spawn_key(self, name: str) -> tuple[int, ...]:
        digest = hashlib.sha256(name.encode("utf-8")).digest()
        return tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 32, 4))

    def stream(self, name: str) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=self._spawn_key(name))
        return np.random.Generator(np.random.PCG64(ss))

    def uniform(self, name: str, shape) -> np.ndarray:
        return self.stream(name).random(shape)

    def normal(self, name: str, shape) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
        count = int(np.prod(shape, dtype=np.int64))
        pairs = (count + 1) // 2
        u = self.stream(name).random((pairs, 2))
        # 1 - u lies in (0, 1], keeping the log finite
        radius = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
        angle = 2.0 * math.pi * u[:, 1]
        z = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1).reshape(-1)
        return z[:count].reshape(shape)
