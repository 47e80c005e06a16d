"""Dense float64 tensors and the seeded random generator.

Tensors are thin immutable wrappers over row-major numpy arrays. Layers work
on plain ``np.ndarray`` internally; ``Tensor`` is the validated value type
that crosses module boundaries (initialisation, images, serialisation).

Random numbers come from SplitMix64, a counter-based generator::

    state <- state + 0x9E3779B97F4A7C15            (mod 2**64)
    z <- state
    z <- (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9       (mod 2**64)
    z <- (z ^ (z >> 27)) * 0x94D049BB133111EB       (mod 2**64)
    output z ^ (z >> 31)

A uniform double in [0, 1) is ``(output >> 11) * 2**-53``. Because the i-th
output depends only on ``seed + i * golden``, a block of n draws is computed
in one vectorised numpy expression and is bit-identical to n scalar draws.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError, UsageError

MAX_RANK = 4

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def _mix_int(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


class Rng:
    """SplitMix64 stream with an explicit 64-bit integer state."""

    def __init__(self, seed: int = 0):
        self.state = int(seed) & _MASK64

    def __repr__(self):
        return f"Rng(state={self.state:#018x})"

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK64
        return _mix_int(self.state)

    def u64(self, n: int) -> np.ndarray:
        if n < 0:
            raise UsageError("draw count must be non-negative")
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * np.uint64(_GOLDEN)
            out = _mix_array(states)
        self.state = (self.state + n * _GOLDEN) & _MASK64
        return out

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1)."""
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)

    def random(self) -> float:
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def integers(self, low: int, high: int, n: int | None = None):
        """Integers in [low, high). Scalar when ``n`` is None."""
        if high <= low:
            raise UsageError(f"empty integer range [{low}, {high})")
        span = high - low
        if n is None:
            return low + min(int(self.random() * span), span - 1)
        vals = np.floor(self.uniform(n) * span).astype(np.int64)
        return low + np.minimum(vals, span - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n), drawing one uniform per swap."""
        perm = np.arange(n)
        draws = self.uniform(max(n - 1, 0))
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = min(int(draws[k] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def spawn(self) -> "Rng":
        """Independent child stream seeded from this stream's next output."""
        return Rng(self.next_u64())


def derive_seed(seed: int, index: int) -> int:
    """Per-item seed used for parallel-safe generation: ``seed XOR index``."""
    return (int(seed) ^ int(index)) & _MASK64


def _check_shape(shape: Iterable[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if not dims:
        raise ShapeError("shape must have at least one dimension")
    if len(dims) > MAX_RANK:
        raise ShapeError(f"rank {len(dims)} exceeds the maximum of {MAX_RANK}")
    if any(d < 1 for d in dims):
        raise ShapeError(f"every extent must be >= 1, got {list(dims)}")
    return dims


class Tensor:
    """Immutable row-major float64 array of rank 1..4."""

    __slots__ = ("_data",)

    def __init__(self, values, shape: Sequence[int] | None = None):
        data = np.array(values, dtype=np.float64, copy=True, order="C")
        if shape is not None:
            dims = _check_shape(shape)
            if data.size != int(np.prod(dims)):
                raise ShapeError(
                    f"{data.size} values do not fill shape {list(dims)}"
                )
            data = data.reshape(dims)
        else:
            if data.ndim == 0:
                data = data.reshape(1)
            _check_shape(data.shape)
        if not np.all(np.isfinite(data)):
            raise ShapeError("tensor values must be finite")
        data.flags.writeable = False
        object.__setattr__(self, "_data", data)

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        # trusted constructor: caller guarantees a fresh float64 C array
        t = object.__new__(cls)
        data.flags.writeable = False
        object.__setattr__(t, "_data", data)
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def data(self) -> np.ndarray:
        """Read-only view of the values."""
        return self._data

    def values(self) -> list[float]:
        """Flat row-major values."""
        return self._data.ravel().tolist()

    def numpy(self) -> np.ndarray:
        """Writable copy."""
        return self._data.copy()

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._data
        return self._data.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self._data, other._data)

    def __hash__(self):
        return hash((self.shape, self._data.tobytes()))

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, values={self._data.tolist()})"

    def __add__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return elementwise("mul", self, other)
        return scale(self, other)


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor._wrap(np.zeros(_check_shape(shape), dtype=np.float64))


def ones(shape: Sequence[int]) -> Tensor:
    return Tensor._wrap(np.ones(_check_shape(shape), dtype=np.float64))


def random_uniform(shape: Sequence[int], lo: float, hi: float, rng: Rng) -> Tensor:
    """Uniform values in [lo, hi), drawn in row-major order from ``rng``."""
    dims = _check_shape(shape)
    if not (np.isfinite(lo) and np.isfinite(hi)) or lo >= hi:
        raise UsageError(f"invalid range: lo={lo} must be < hi={hi}")
    n = int(np.prod(dims))
    vals = lo + (hi - lo) * rng.uniform(n)
    # lo + (hi-lo)*u can round up to hi for u close to 1
    vals = np.minimum(vals, np.nextafter(hi, lo))
    return Tensor._wrap(vals.reshape(dims))


_OPS = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    try:
        fn = _OPS[op]
    except KeyError:
        raise UsageError(f"unknown elementwise op {op!r}") from None
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {list(a.shape)} vs {list(b.shape)}")
    return Tensor(fn(a.data, b.data))


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor(a.data * float(c))


def reshape(a: Tensor, new_shape: Sequence[int]) -> Tensor:
    dims = _check_shape(new_shape)
    if int(np.prod(dims)) != a.size:
        raise ShapeError(f"cannot reshape {list(a.shape)} into {list(dims)}")
    return Tensor._wrap(a.data.reshape(dims).copy())
