"""Dense float32 arrays and a seeded deterministic random source.

Images, feature maps, weights, and gradients are all plain numpy float32
arrays in row-major (C) order; this module pins that convention and
provides the reproducible generator used for weight init, noise, and
shuffling. The generator is a splitmix64 counter with Box-Muller Gaussian
sampling, so equal seeds give bit-identical streams.
"""

from __future__ import annotations

import math

import numpy as np

DTYPE = np.float32

# Type alias: every tensor in this package is a C-ordered float32 ndarray.
Tensor = np.ndarray

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ValueError("shape must have at least one extent")
    if any(s < 1 for s in shape):
        raise ValueError(f"all extents must be >= 1, got {shape}")
    return shape


def zeros(shape) -> Tensor:
    """All-zero tensor of the given shape."""
    return np.zeros(_check_shape(shape), dtype=DTYPE)


def zeros_like(t: Tensor) -> Tensor:
    return np.zeros(t.shape, dtype=DTYPE)


def as_tensor(data, shape=None) -> Tensor:
    """Coerce to a C-ordered float32 array, optionally reshaped."""
    t = np.ascontiguousarray(data, dtype=DTYPE)
    if shape is not None:
        t = t.reshape(_check_shape(shape))
    return t


def _require_same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b)
    return (a + b).astype(DTYPE, copy=False)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b)
    return (a - b).astype(DTYPE, copy=False)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b)
    return (a * b).astype(DTYPE, copy=False)


_BINARY_OPS = {"add": add, "sub": sub, "mul": mul}


def map_binary(a: Tensor, b: Tensor, op: str) -> Tensor:
    """Elementwise add/sub/mul of two equal-shape tensors."""
    try:
        fn = _BINARY_OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}, expected one of {sorted(_BINARY_OPS)}")
    return fn(a, b)


def _mix64_int(z: int) -> int:
    """splitmix64 finalizer on a Python int (mod 2**64)."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))


class Rng:
    """Seedable deterministic generator (splitmix64 stream).

    Single-owner: do not share one instance across threads. Parallel code
    should derive independent children with :meth:`fork`.
    """

    def __init__(self, seed: int):
        self._seed = int(seed) & _MASK64
        self._counter = 0

    @property
    def seed(self) -> int:
        return self._seed

    def fork(self, stream: int) -> "Rng":
        """Independent child generator, deterministic in (seed, stream)."""
        salt = _mix64_int(((int(stream) + 1) * _GOLDEN) & _MASK64)
        return Rng(_mix64_int(self._seed ^ salt))

    def next_uint64(self) -> int:
        self._counter += 1
        return _mix64_int((self._seed + self._counter * _GOLDEN) & _MASK64)

    def _words(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self._seed) + idx * np.uint64(_GOLDEN)
        return _mix64_array(z)

    def uniform01(self, n: int) -> np.ndarray:
        """n doubles in (0, 1], 53-bit resolution."""
        w = self._words(int(n)) >> np.uint64(11)
        return (w.astype(np.float64) + 1.0) * 2.0**-53

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> Tensor:
        shape = _check_shape(shape)
        u = self.uniform01(math.prod(shape))
        return (low + (high - low) * u).astype(DTYPE).reshape(shape)

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> Tensor:
        """I.i.d. Gaussian draws via Box-Muller, row-major fill order."""
        if std < 0:
            raise ValueError(f"std must be >= 0, got {std}")
        shape = _check_shape(shape)
        n = math.prod(shape)
        m = (n + 1) // 2
        u1 = self.uniform01(m)
        u2 = self.uniform01(m)
        r = np.sqrt(-2.0 * np.log(u1))
        ang = (2.0 * np.pi) * u2
        z = np.concatenate([r * np.cos(ang), r * np.sin(ang)])[:n]
        return (mean + std * z).astype(DTYPE).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic shuffled index array 0..n-1."""
        return np.argsort(self.uniform01(int(n)), kind="stable")


def normal(rng: Rng, shape, mean: float = 0.0, std: float = 1.0) -> Tensor:
    """Gaussian tensor from an explicit generator (see :meth:`Rng.normal`)."""
    return rng.normal(shape, mean, std)
