"""Deterministic numerics: float64 tensor helpers, a fixed PRNG, and a
finite-difference gradient oracle.

All arithmetic in this package is 64-bit. The PRNG is splitmix64 with
53-bit mantissa extraction, so a given seed yields the same stream on
every platform; everything downstream (weight init, Bernoulli candidate
sampling, shuffles) derives from it.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ParameterError, ShapeError

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_INV_2_53 = 2.0 ** -53


def _mix64(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


class Rng:
    """splitmix64 stream. Single-owner: never share one instance across
    threads; use :meth:`spawn` to derive independent child streams."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_uint64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK64
        return _mix64(self.state)

    def next_uniform(self) -> float:
        """Uniform draw in [0, 1) using the top 53 bits."""
        return (self.next_uint64() >> 11) * _INV_2_53

    def uniform_array(self, n: int) -> np.ndarray:
        """Vectorized batch of `n` uniforms, bit-identical to `n` scalar
        :meth:`next_uniform` calls."""
        if n < 0:
            raise ParameterError("n must be >= 0")
        if n == 0:
            return np.empty(0)
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64)
            z = np.uint64(self.state) + steps * np.uint64(_GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * _GOLDEN) & _MASK64
        return (z >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def bernoulli(self, p: float) -> int:
        if not 0.0 <= p <= 1.0:
            raise ParameterError(f"bernoulli p must be in [0, 1], got {p}")
        return 1 if self.next_uniform() < p else 0

    def randint(self, n: int) -> int:
        """Integer in [0, n)."""
        if n < 1:
            raise ParameterError("randint needs n >= 1")
        return min(int(self.next_uniform() * n), n - 1)

    def normal(self) -> float:
        """Standard normal via Box-Muller; two uniforms per draw, no
        cached spare, so the state stays a single 64-bit word."""
        u1 = self.next_uniform()
        u2 = self.next_uniform()
        return math.sqrt(-2.0 * math.log1p(-u1)) * math.cos(2.0 * math.pi * u2)

    def normal_array(self, shape: int | Sequence[int]) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u = self.uniform_array(2 * n)
        r = np.sqrt(-2.0 * np.log1p(-u[0::2]))
        return (r * np.cos(2.0 * np.pi * u[1::2])).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) (argsort of one uniform
        block; ties are broken stably and are astronomically rare)."""
        if n == 0:
            return np.empty(0, dtype=np.int64)
        return np.argsort(self.uniform_array(n), kind="stable").astype(np.int64)

    def spawn(self, k: int) -> "Rng":
        """Pure derivation of an independent child stream; does not
        advance this stream."""
        child = Rng(0)
        child.state = _mix64(self.state ^ _mix64((k + 1) * _GOLDEN & _MASK64))
        return child

    def getstate(self) -> int:
        return self.state

    def setstate(self, state: int) -> None:
        self.state = int(state) & _MASK64


def as_tensor(data) -> np.ndarray:
    """Coerce to a contiguous float64 array."""
    return np.ascontiguousarray(np.asarray(data, dtype=np.float64))


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-major matrix product with shape validation."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"gemm needs 2-d operands, got {a.ndim}-d and {b.ndim}-d")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function, element by element.

    The workhorse oracle for every hand-derived backward pass in this
    package: independent of the analytic path it is used to check.
    """
    if h <= 0:
        raise ParameterError("step h must be positive")
    x = as_tensor(x)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError("non-finite function value during differencing")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
