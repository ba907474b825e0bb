"""Numerics substrate: seeded random streams, diagonal Gaussians, quantiles.

Randomness is drawn from numpy's Philox4x64-10 counter-based bit generator,
seeded through ``SeedSequence``. Normal variates use numpy's ziggurat
transform. Child streams are derived deterministically from
``(master seed, tag, index)`` so that any partition of work across threads
consumes exactly the same numbers.
"""
from __future__ import annotations

import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")
R = TypeVar("R")

LOG_2PI = math.log(2.0 * math.pi)


def tag_hash(tag: str) -> int:
    """CRC-32 of the UTF-8 tag; stable across platforms and Python versions."""
    return zlib.crc32(tag.encode("utf-8")) & 0xFFFFFFFF


class SeededRng:
    """Reproducible random stream keyed by a 64-bit seed and a spawn path.

    The stream for ``SeededRng(seed, key)`` is Philox seeded with
    ``SeedSequence(seed, spawn_key=key)``. ``child(tag, index)`` appends
    ``(crc32(tag), index)`` to the key, so children never depend on how much
    of the parent stream was consumed.
    """

    def __init__(self, seed: int, key: Sequence[int] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, tag: str, index: int = 0) -> "SeededRng":
        return SeededRng(self.seed, self.key + (tag_hash(tag), int(index)))

    def normal(self, size) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, low: float, high: float, size) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def random(self, size) -> np.ndarray:
        return self._gen.random(size)

    def choice(self, n: int, size, p=None) -> np.ndarray:
        return self._gen.choice(n, size=size, p=p)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, key={self.key})"


def as_vec(x, name: str = "x") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _check_diag(mean: np.ndarray, diag_var: np.ndarray) -> None:
    if mean.shape[-1] != diag_var.shape[-1]:
        raise ValueError(
            f"dimension mismatch: mean has {mean.shape[-1]}, variance has {diag_var.shape[-1]}"
        )
    if np.any(diag_var <= 0):
        raise ValueError("variances must be strictly positive")


def gaussian_sample(mean, diag_var, rng: SeededRng, n: int | None = None) -> np.ndarray:
    """Draw from N(mean, diag(diag_var)); one vector, or an ``(n, d)`` array if ``n`` is given."""
    mean = as_vec(mean, "mean")
    diag_var = as_vec(diag_var, "diag_var")
    _check_diag(mean, diag_var)
    shape = mean.shape if n is None else (n,) + mean.shape
    return mean + np.sqrt(diag_var) * rng.normal(shape)


def gaussian_logpdf(x, mean, diag_var) -> float | np.ndarray:
    """Log-density of a diagonal Gaussian. ``x`` may be a vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    mean = as_vec(mean, "mean")
    diag_var = as_vec(diag_var, "diag_var")
    _check_diag(mean, diag_var)
    if x.shape[-1] != mean.shape[-1]:
        raise ValueError(f"dimension mismatch: x has {x.shape[-1]}, mean has {mean.shape[-1]}")
    d = mean.shape[-1]
    quad = np.sum((x - mean) ** 2 / diag_var, axis=-1)
    out = -0.5 * (d * LOG_2PI + np.sum(np.log(diag_var)) + quad)
    return float(out) if np.ndim(out) == 0 else out


def quantile(values: Iterable[float], q: float) -> float:
    """Lower empirical quantile: the ``ceil(q*N)``-th smallest value (q=0 gives the minimum)."""
    vals = np.sort(np.asarray(list(values) if not isinstance(values, np.ndarray) else values,
                              dtype=np.float64).ravel())
    if vals.size == 0:
        raise ValueError("quantile of an empty list")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    idx = min(max(math.ceil(q * vals.size) - 1, 0), vals.size - 1)
    return float(vals[idx])


def parallel_map(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> list[R]:
    """Order-preserving map; work items must be independent for results to match any thread count."""
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def blocks(n: int, size: int) -> list[tuple[int, int]]:
    """Fixed ``[start, stop)`` partition of ``range(n)``; independent of the thread count."""
    return [(s, min(s + size, n)) for s in range(0, n, size)]
