"""Dense numeric substrate: validated float64 arrays, ordered reductions and a
splittable counter-based RNG.

Vectors and matrices are plain ``numpy.ndarray`` objects of dtype float64.
The constructors here only add the finiteness and shape checks every other
module relies on.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np


class DimensionError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


def vector(data) -> np.ndarray:
    """Return ``data`` as a 1-D float64 array, rejecting NaN/Inf and empty input."""
    arr = np.array(data, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise DimensionError("vector must have at least one element")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("vector contains non-finite values")
    return arr


def matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if rows is not None and cols is not None:
        if arr.size != rows * cols:
            raise DimensionError(f"expected {rows}x{cols}={rows * cols} values, got {arr.size}")
        arr = arr.reshape(rows, cols)
    if arr.ndim != 2:
        raise DimensionError(f"matrix must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("matrix contains non-finite values")
    return arr


def ordered_sum(values: np.ndarray) -> float:
    """Left-to-right sum over the flattened input."""
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    if flat.size == 0:
        return 0.0
    # accumulate is sequential by construction, unlike np.sum's pairwise scheme
    return float(np.add.accumulate(flat)[-1])


def dot(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.size} vs {b.size}")
    return ordered_sum(a * b)


def norms(v) -> tuple[float, float, float]:
    """(l1, l2, linf) norms of ``v``."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size == 0:
        return 0.0, 0.0, 0.0
    absv = np.abs(v)
    return ordered_sum(absv), math.sqrt(ordered_sum(v * v)), float(absv.max())


def _label_bytes(label) -> bytes:
    if isinstance(label, tuple):
        return b"(" + b",".join(_label_bytes(x) for x in label) + b")"
    if isinstance(label, (bool, np.bool_)):
        raise TypeError("bool is not a valid stream label")
    if isinstance(label, (int, np.integer)):
        return b"i" + str(int(label)).encode()
    if isinstance(label, str):
        return b"s" + label.encode()
    raise TypeError(f"unsupported stream label type: {type(label).__name__}")


class SeededRng:
    """Philox stream keyed by ``(seed, stream)``.

    Child streams come from :meth:`split`, which hashes the parent key and a
    label; they never depend on how far the parent has advanced.
    """

    __slots__ = ("seed", "stream", "_gen")

    def __init__(self, seed: int, stream: int = 0):
        if not (0 <= seed < 2**64 and 0 <= stream < 2**64):
            raise ValueError("seed and stream must be unsigned 64-bit integers")
        self.seed = int(seed)
        self.stream = int(stream)
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, stream={self.stream:#x})"

    def split(self, label) -> "SeededRng":
        h = hashlib.blake2b(digest_size=8)
        h.update(self.stream.to_bytes(8, "little"))
        h.update(_label_bytes(label))
        return SeededRng(self.seed, int.from_bytes(h.digest(), "little"))

    def uniform(self, size=None):
        """Draw(s) from U[0, 1)."""
        if size is None:
            return float(self._gen.random())
        return self._gen.random(size)

    def gaussian(self, sigma: float = 1.0, size=None):
        """N(0, sigma^2) via Box-Muller on two uniforms (cosine branch only)."""
        if sigma < 0:
            raise ValueError(f"sigma must be nonnegative, got {sigma}")
        n = 1 if size is None else int(np.prod(size))
        u = self._gen.random(2 * n)
        radius = np.sqrt(-2.0 * np.log1p(-u[:n]))
        z = radius * np.cos(2.0 * np.pi * u[n:])
        if sigma == 0:
            z = np.zeros_like(z)
        else:
            z = sigma * z
        if size is None:
            return float(z[0])
        return z.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, k: int) -> np.ndarray:
        return self._gen.choice(n, size=k, replace=False)

    def dirichlet(self, alpha) -> np.ndarray:
        return self._gen.dirichlet(alpha)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def normal_array(self, size) -> np.ndarray:
        """Standard normals through the same Box-Muller path as :meth:`gaussian`."""
        return self.gaussian(1.0, size=size)


def rng_uniform(rng: SeededRng) -> float:
    return rng.uniform()


def rng_gaussian(rng: SeededRng, sigma: float) -> float:
    return rng.gaussian(sigma)
