"""Numeric kernel: float64 matrices, stable softmax, splittable counter-based RNG.

Matrices are plain ``numpy.ndarray`` objects of dtype float64; ``as_matrix``
is the single validation point. Random streams are stateless: a stream is
identified by ``(seed, path)`` and every draw is a pure function of that key
and a counter, so workers can derive identical masks under any schedule.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .errors import NumericError, ParameterError, ShapeError

_MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_ROOT_SALT = 0x5EED5EED5EED5EED


def as_matrix(data, *, name: str = "matrix") -> np.ndarray:
    """Validate and return ``data`` as a finite 2-D float64 array."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite entries")
    return arr


def softmax(values, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax along ``axis``."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise NumericError("softmax of an empty vector")
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax input contains non-finite values")
    z = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return z / np.sum(z, axis=axis, keepdims=True)


def _mix64(z: np.ndarray) -> np.ndarray:
    # SplitMix64 finalizer; uint64 arithmetic wraps modulo 2**64.
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def _u64(values) -> np.ndarray:
    if isinstance(values, (int, np.integer)):
        return np.array([int(values) & _MASK64], dtype=np.uint64)
    return np.array([int(v) & _MASK64 for v in values], dtype=np.uint64)


def _derive(keys: np.ndarray, ids: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return _mix64(keys ^ _mix64(ids + _GOLDEN))


def _bits(keys: np.ndarray, counters: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return _mix64(keys + (counters + np.uint64(1)) * _GOLDEN)


def _to_unit(bits: np.ndarray) -> np.ndarray:
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


@dataclass(frozen=True)
class RngStream:
    """Deterministic random stream keyed by a seed and a hierarchical path.

    Draw methods always start at counter 0: calling ``uniform(5)`` twice gives
    the same five numbers. Use ``split`` to get fresh independent streams.
    """

    seed: int
    path: tuple[int, ...] = ()

    @cached_property
    def key(self) -> int:
        k = _mix64(_u64(self.seed ^ _ROOT_SALT))
        for step in self.path:
            k = _derive(k, _u64(step))
        return int(k[0])

    def split(self, *ids: int) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(int(i) for i in ids))

    def bits(self, n: int, offset: int = 0) -> np.ndarray:
        counters = np.arange(offset, offset + n, dtype=np.uint64)
        return _bits(np.full(n, self.key, dtype=np.uint64), counters)

    def uniform(self, n: int, offset: int = 0) -> np.ndarray:
        """``n`` draws from U[0, 1) with 53-bit resolution."""
        return _to_unit(self.bits(n, offset))

    def normal(self, n: int, offset: int = 0) -> np.ndarray:
        """Standard normal draws by Box-Muller over ``2n`` uniforms."""
        u = self.uniform(2 * n, 2 * offset)
        u1 = 1.0 - u[:n]  # (0, 1], keeps log finite
        u2 = u[n:]
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")


def rng_for(seed: int, path: Iterable[int] = ()) -> RngStream:
    return RngStream(int(seed), tuple(int(p) for p in path))


def uniform_grid(stream: RngStream, shape: Sequence[int], n: int) -> np.ndarray:
    """Vectorised draws equal to ``stream.split(*idx).uniform(n)`` for every
    index tuple ``idx`` of ``shape``; returns an array of shape ``shape + (n,)``."""
    keys = np.array(stream.key, dtype=np.uint64)
    for size in shape:
        ids = np.arange(size, dtype=np.uint64)
        keys = _derive(keys[..., None], ids)
    counters = np.arange(n, dtype=np.uint64)
    return _to_unit(_bits(keys[..., None], counters))


def bernoulli_mask(rng: RngStream, q: float, n: int) -> np.ndarray:
    """Binary vector of length ``n`` with entries i.i.d. Bernoulli(q)."""
    if not 0.0 <= q <= 1.0:
        raise ParameterError(f"Bernoulli probability must lie in [0, 1], got {q}")
    if n < 1:
        raise ParameterError("mask length must be at least 1")
    return (rng.uniform(n) < q).astype(np.int8)
