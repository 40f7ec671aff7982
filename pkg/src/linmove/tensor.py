"""Dense tensor helpers: index ranges, block slicing and a deterministic inner product.

Tensors are plain row-major :class:`numpy.ndarray` objects.  Everything in the
package addresses sub-blocks through :class:`IndexRange`, which is expressed in
the index space of the tensor it is applied to (global or local).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class ContractError(ValueError):
    """Raised when a caller violates a documented pre-condition."""


@dataclass(frozen=True)
class IndexRange:
    """Per-dimension half-open intervals ``[start, stop)``."""

    start: tuple[int, ...]
    stop: tuple[int, ...]

    def __post_init__(self):
        start = tuple(int(s) for s in self.start)
        stop = tuple(int(s) for s in self.stop)
        if len(start) != len(stop):
            raise ContractError(f"rank mismatch in range: {start} vs {stop}")
        if any(a > b for a, b in zip(start, stop)):
            raise ContractError(f"start exceeds stop in range [{start}, {stop})")
        object.__setattr__(self, "start", start)
        object.__setattr__(self, "stop", stop)

    @classmethod
    def full(cls, shape: Sequence[int]) -> "IndexRange":
        return cls((0,) * len(shape), tuple(shape))

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[int, int]]) -> "IndexRange":
        return cls(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))

    @property
    def ndim(self) -> int:
        return len(self.start)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(b - a for a, b in zip(self.start, self.stop))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def empty(self) -> bool:
        return self.size == 0

    def slices(self) -> tuple[slice, ...]:
        return tuple(slice(a, b) for a, b in zip(self.start, self.stop))

    def intersect(self, other: "IndexRange") -> "IndexRange":
        if other.ndim != self.ndim:
            raise ContractError("rank mismatch in intersect")
        lo = tuple(max(a, b) for a, b in zip(self.start, other.start))
        hi = tuple(max(l, min(a, b)) for l, a, b in zip(lo, self.stop, other.stop))
        return IndexRange(lo, hi)

    def shift(self, offset: Sequence[int]) -> "IndexRange":
        """Translate by ``-offset`` (global → local coordinates of a block starting at ``offset``)."""
        return IndexRange(
            tuple(a - o for a, o in zip(self.start, offset)),
            tuple(b - o for b, o in zip(self.stop, offset)),
        )

    def within(self, shape: Sequence[int]) -> bool:
        return len(shape) == self.ndim and all(
            0 <= a and b <= n for a, b, n in zip(self.start, self.stop, shape)
        )

    def __str__(self):
        return "x".join(f"[{a},{b})" for a, b in zip(self.start, self.stop))


def _check_range(t: np.ndarray, r: IndexRange):
    if not r.within(t.shape):
        raise ContractError(f"range {r} out of bounds for shape {t.shape}")


def inner_product(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean inner product accumulated left to right in flat (row-major) order.

    ``np.dot`` uses blocked/pairwise summation whose order depends on the build,
    so the products are summed with a sequential cumulative sum instead.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ContractError(f"inner product of mismatched shapes {a.shape} and {b.shape}")
    if a.size == 0:
        return 0.0
    prod = (a * b).ravel()
    return float(np.cumsum(prod)[-1])


def norm(a: np.ndarray) -> float:
    return float(np.sqrt(inner_product(a, a)))


def slice_block(t: np.ndarray, r: IndexRange) -> np.ndarray:
    """Copy of the sub-block ``t[r]``; the source is left untouched."""
    _check_range(t, r)
    return t[r.slices()].copy()


def assign_slice(t: np.ndarray, r: IndexRange, src: np.ndarray) -> np.ndarray:
    _check_range(t, r)
    if tuple(src.shape) != r.shape:
        raise ContractError(f"source shape {src.shape} does not match range extents {r.shape}")
    t[r.slices()] = src
    return t


def add_slice(t: np.ndarray, r: IndexRange, src: np.ndarray) -> np.ndarray:
    _check_range(t, r)
    if tuple(src.shape) != r.shape:
        raise ContractError(f"source shape {src.shape} does not match range extents {r.shape}")
    t[r.slices()] += src
    return t


def zeros(shape: Sequence[int], dtype=np.float64) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ContractError("rank-0 tensors are not allowed; use shape (1,)")
    return np.zeros(shape, dtype=dtype)


def rel_error(a: np.ndarray, ref: np.ndarray) -> float:
    """``||a - ref|| / ||ref||``; the absolute error when ``ref`` is zero."""
    a = np.asarray(a, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if a.shape != ref.shape:
        raise ContractError(f"cannot compare shapes {a.shape} and {ref.shape}")
    diff = float(np.linalg.norm((a - ref).ravel()))
    scale = float(np.linalg.norm(ref.ravel()))
    return diff / scale if scale > 0 else diff
