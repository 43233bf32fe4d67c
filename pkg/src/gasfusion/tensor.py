"""Dense float64 tensors and the deterministic random stream.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 with 1 to 4
dimensions. The helpers here are the shape-checked entry points; none of
them broadcast, so any shape coercion in calling code is an explicit
reshape.

``Rng`` is xoshiro256** (Blackman and Vigna) with its 256-bit state filled
from the seed by splitmix64. Floats are ``(x >> 11) * 2**-53``; normals use
the Box-Muller transform on pairs of floats. Identical seeds give
identical streams on every platform.
"""

from __future__ import annotations

import math
from typing import Sequence

import numba
import numpy as np

from .errors import InvalidRange, InvalidShape, ShapeMismatch

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def check_shape(shape) -> tuple[int, ...]:
    """Validate ``shape`` and return it as a tuple of ints."""
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    try:
        dims = tuple(int(d) for d in shape)
    except TypeError:
        raise InvalidShape(f"shape must be a sequence of ints, got {shape!r}") from None
    if not 1 <= len(dims) <= 4:
        raise InvalidShape(f"tensors have 1-4 dimensions, got shape {dims}")
    if any(d <= 0 for d in dims):
        raise InvalidShape(f"shape extents must be positive, got {dims}")
    return dims


def tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Build a float64 tensor from nested lists or a flat row-major list."""
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        dims = check_shape(shape)
        if arr.size != math.prod(dims):
            raise ShapeMismatch(f"{arr.size} values cannot fill shape {dims}")
        arr = arr.reshape(dims)
    else:
        check_shape(arr.shape)
    return arr


def zeros(shape) -> np.ndarray:
    return np.zeros(check_shape(shape), dtype=np.float64)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"inner extents differ: {a.shape} x {b.shape}")
    return a @ b


_EWISE = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def ewise(a: np.ndarray, b: np.ndarray, op: str) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeMismatch(f"elementwise {op} on {a.shape} and {b.shape}")
    try:
        fn = _EWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def uniform(rng: "Rng", shape, lo: float, hi: float) -> np.ndarray:
    if not lo < hi:
        raise InvalidRange(f"uniform needs lo < hi, got [{lo}, {hi})")
    dims = check_shape(shape)
    return rng.uniform(lo, hi, dims)


# --------------------------------------------------------------------------
# random stream
# --------------------------------------------------------------------------


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step. Returns ``(new_state, output)``."""
    x = (x + _GOLDEN) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


def mix_seed(seed: int, *keys: int) -> int:
    """Fold integer keys into a seed; used to derive independent streams."""
    h = splitmix64(seed & MASK64)[1]
    for k in keys:
        h = splitmix64((h ^ splitmix64(int(k) & MASK64)[1]) & MASK64)[1]
    return h


@numba.njit(cache=True, inline="always")
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@numba.njit(cache=True, inline="always")
def _next(s):
    result = _rotl(s[1] * np.uint64(5), 7) * np.uint64(9)
    t = s[1] << np.uint64(17)
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], 45)
    return result


@numba.njit(cache=True)
def _fill_u64(s, out):
    for i in range(out.size):
        out[i] = _next(s)


@numba.njit(cache=True)
def _fill_double(s, out):
    for i in range(out.size):
        out[i] = np.float64(_next(s) >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@numba.njit(cache=True)
def _fill_normal(s, out):
    n = out.size
    i = 0
    while i < n:
        u1 = 1.0 - np.float64(_next(s) >> np.uint64(11)) * (1.0 / 9007199254740992.0)
        u2 = np.float64(_next(s) >> np.uint64(11)) * (1.0 / 9007199254740992.0)
        r = math.sqrt(-2.0 * math.log(u1))
        out[i] = r * math.cos(2.0 * math.pi * u2)
        if i + 1 < n:
            out[i + 1] = r * math.sin(2.0 * math.pi * u2)
        i += 2


@numba.njit(cache=True)
def _shuffle(s, idx):
    for i in range(idx.size - 1, 0, -1):
        u = np.float64(_next(s) >> np.uint64(11)) * (1.0 / 9007199254740992.0)
        j = int(u * (i + 1))
        tmp = idx[i]
        idx[i] = idx[j]
        idx[j] = tmp


class Rng:
    """Seeded xoshiro256** stream. Single owner; not thread-safe."""

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        x = self.seed
        words = []
        for _ in range(4):
            x, out = splitmix64(x)
            words.append(out)
        self._state = np.array(words, dtype=np.uint64)

    @classmethod
    def derive(cls, seed: int, *keys: int) -> "Rng":
        """Independent stream for ``(seed, *keys)``, e.g. one per sample index."""
        return cls(mix_seed(seed, *keys))

    def next_u64(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.uint64)
        _fill_u64(self._state, out)
        return out

    def random(self, shape=()) -> np.ndarray | float:
        """Floats in [0, 1)."""
        out = np.empty(shape, dtype=np.float64)
        _fill_double(self._state, out.reshape(-1))
        return float(out) if out.ndim == 0 else out

    def uniform(self, lo: float, hi: float, shape=()):
        u = self.random(shape)
        return lo + (hi - lo) * u

    def normal(self, shape=(), loc: float = 0.0, scale: float = 1.0):
        out = np.empty(shape, dtype=np.float64)
        _fill_normal(self._state, out.reshape(-1))
        out = loc + scale * out
        return float(out) if out.ndim == 0 else out

    def integers(self, upper: int, shape=()):
        """Integers in [0, upper) by scaling a uniform float."""
        u = self.random(shape)
        return np.floor(np.asarray(u) * upper).astype(np.int64) if np.ndim(u) else int(u * upper)

    def permutation(self, n: int) -> np.ndarray:
        idx = np.arange(n, dtype=np.int64)
        _shuffle(self._state, idx)
        return idx
