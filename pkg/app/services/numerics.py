"""
Dense float64 math shared by every service.

Vectors and matrices are plain ``numpy`` arrays (1-D / 2-D, float64).
Reductions that feed model parameters run in a fixed index order so results
are bit-reproducible across runs and thread counts.
"""
import logging
from typing import Callable, Sequence, Tuple

import numpy as np

from ..errors import InvalidInputError, OracleError, ShapeError

logger = logging.getLogger(__name__)

Vector = np.ndarray
Matrix = np.ndarray

DEFAULT_FD_STEP = 1e-5


def as_vector(values, name: str = "vector") -> Vector:
    """Coerce to a finite, non-empty 1-D float64 array"""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        v = v.reshape(-1)
    if v.size == 0:
        raise InvalidInputError(f"{name} is empty")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return v


def sigmoid(v) -> Vector:
    """Logistic function, using the exp(x)/(1+exp(x)) branch for negative x"""
    x = as_vector(v, "sigmoid input")
    return _sigmoid_unchecked(x)


def _sigmoid_unchecked(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softmax(v) -> Vector:
    x = as_vector(v, "softmax input")
    z = np.exp(x - np.max(x))
    return z / np.sum(z)


def mse(pred, truth) -> float:
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(truth, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise ShapeError(f"mse length mismatch: {p.size} vs {t.size}")
    if p.size == 0:
        raise ShapeError("mse of empty vectors")
    diff = p - t
    return float(np.dot(diff, diff) / diff.size)


def mse_grad(pred, truth) -> Vector:
    """d mse / d pred"""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    return 2.0 * (p - t) / p.size


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = DEFAULT_FD_STEP) -> Vector:
    """
    Central-difference gradient oracle

    Args:
        f: scalar function of a vector
        x: evaluation point
        h: step, > 0

    Returns:
        (f(x+h e_j) - f(x-h e_j)) / 2h for every coordinate j
    """
    if h <= 0:
        raise InvalidInputError("finite-difference step must be positive")
    point = np.array(x, dtype=np.float64).reshape(-1)
    grad = np.zeros_like(point)
    for j in range(point.size):
        orig = point[j]
        point[j] = orig + h
        upper = f(point.copy())
        point[j] = orig - h
        lower = f(point.copy())
        point[j] = orig
        if not (np.isfinite(upper) and np.isfinite(lower)):
            raise OracleError(f"non-finite evaluation at coordinate {j}")
        grad[j] = (upper - lower) / (2.0 * h)
    return grad


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare {a.size} and {b.size} entries")
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def ordered_sum(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Left-to-right sum, never reordered"""
    if not vectors:
        raise ShapeError("nothing to sum")
    total = np.array(vectors[0], dtype=np.float64, copy=True)
    for v in vectors[1:]:
        if v.shape != total.shape:
            raise ShapeError(f"shape mismatch in sum: {v.shape} vs {total.shape}")
        total = total + v
    return total


class RngStream:
    """
    Seeded random stream with derivable substreams

    A stream is identified by ``(seed, spawn_key)``; ``fork(*key)`` returns the
    substream whose spawn key is this stream's key extended by ``key``. Keys are
    mixed by ``numpy.random.SeedSequence`` and drawn from PCG64, so equal
    identities give bit-identical draws. A stream has one owner; fork before
    handing work to other threads.
    """

    ALGORITHM = "PCG64"

    def __init__(self, seed: int, spawn_key: Tuple[int, ...] = ()):
        if seed < 0:
            raise InvalidInputError("seed must be non-negative")
        self.seed = int(seed)
        self.spawn_key = tuple(int(k) for k in spawn_key)
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
        self._generator = np.random.Generator(np.random.PCG64(sequence))
        self.position = 0

    def fork(self, *key: int) -> "RngStream":
        return RngStream(self.seed, self.spawn_key + tuple(key))

    def uniform(self, low: float, high: float, size=None):
        out = self._generator.uniform(low, high, size)
        self.position += int(np.size(out))
        return out

    def normal(self, scale: float = 1.0, size=None):
        out = self._generator.normal(0.0, scale, size)
        self.position += int(np.size(out))
        return out

    def integers(self, low: int, high: int, size=None):
        out = self._generator.integers(low, high, size)
        self.position += int(np.size(out))
        return out

    def choice(self, options: Sequence):
        if not options:
            raise InvalidInputError("cannot choose from an empty sequence")
        return options[int(self.integers(0, len(options)))]

    def permutation(self, n: int) -> np.ndarray:
        out = self._generator.permutation(n)
        self.position += n
        return out

    def random(self, size=None):
        out = self._generator.random(size)
        self.position += int(np.size(out))
        return out

    def __repr__(self):
        return f"RngStream(seed={self.seed}, spawn_key={self.spawn_key}, position={self.position})"
