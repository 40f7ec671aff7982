"""Cartesian partitions of global tensor shapes over worker grids."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Iterator, Sequence

import numpy as np

from .tensor import ContractError, IndexRange


def balanced_sizes(n: int, p: int) -> list[int]:
    """Split ``n`` indices over ``p`` workers; the first ``n % p`` get one extra."""
    if p < 1:
        raise ContractError(f"worker count must be positive, got {p}")
    if p > n:
        raise ContractError(f"cannot split extent {n} over {p} workers")
    q, r = divmod(n, p)
    return [q + 1 if i < r else q for i in range(p)]


def balanced_bounds(n: int, p: int) -> list[tuple[int, int]]:
    bounds, lo = [], 0
    for s in balanced_sizes(n, p):
        bounds.append((lo, lo + s))
        lo += s
    return bounds


class Partition:
    """A global shape decomposed over a cartesian grid of workers.

    ``ranks`` is an integer array shaped like ``grid`` that names the global
    worker holding each grid cell; by default cells are numbered row-major
    starting from 0.
    """

    def __init__(self, global_shape: Sequence[int], grid: Sequence[int], ranks=None):
        self.global_shape = tuple(int(n) for n in global_shape)
        self.grid = tuple(int(p) for p in grid)
        if len(self.grid) != len(self.global_shape):
            raise ContractError(f"grid {self.grid} and shape {self.global_shape} differ in rank")
        self._bounds = [balanced_bounds(n, p) for n, p in zip(self.global_shape, self.grid)]
        if ranks is None:
            ranks = np.arange(int(np.prod(self.grid)))
        ranks = np.asarray(ranks, dtype=int).reshape(self.grid)
        if len(set(ranks.ravel().tolist())) != ranks.size:
            raise ContractError("a worker may appear only once in a partition")
        self.ranks = ranks
        self._coords = {int(r): c for c, r in np.ndenumerate(ranks)}

    def __repr__(self):
        return (f"Partition(shape={self.global_shape}, grid={self.grid}, "
                f"ranks={self.ranks.ravel().tolist()})")

    @property
    def size(self) -> int:
        return self.ranks.size

    @property
    def members(self) -> list[int]:
        return sorted(self._coords)

    def __contains__(self, rank: int) -> bool:
        return rank in self._coords

    def coords(self, rank: int) -> tuple[int, ...]:
        try:
            return self._coords[rank]
        except KeyError:
            raise ContractError(f"worker {rank} is not part of {self!r}") from None

    def rank_at(self, coords: Sequence[int]) -> int:
        return int(self.ranks[tuple(coords)])

    def neighbor(self, rank: int, dim: int, step: int) -> int | None:
        c = list(self.coords(rank))
        c[dim] += step
        if not 0 <= c[dim] < self.grid[dim]:
            return None
        return self.rank_at(c)

    def dim_bounds(self, dim: int) -> list[tuple[int, int]]:
        return list(self._bounds[dim])

    def bulk_range(self, rank: int) -> IndexRange:
        c = self.coords(rank)
        return IndexRange.from_pairs([self._bounds[d][i] for d, i in enumerate(c)])

    def local_shape(self, rank: int) -> tuple[int, ...] | None:
        if rank not in self:
            return None
        return self.bulk_range(rank).shape

    def items(self) -> Iterator[tuple[int, IndexRange]]:
        for c in product(*(range(p) for p in self.grid)):
            r = self.rank_at(c)
            yield r, self.bulk_range(r)

    def with_shape(self, global_shape: Sequence[int]) -> "Partition":
        """Same grid and worker placement over a different global shape."""
        return Partition(global_shape, self.grid, self.ranks)


def decompose(global_shape: Sequence[int], grid: Sequence[int], ranks=None) -> Partition:
    return Partition(global_shape, grid, ranks)


def split(part: Partition, array: np.ndarray, workers: int | None = None) -> list:
    """Per-worker copies of ``array``'s bulk blocks, ``None`` for non-members."""
    if tuple(array.shape) != part.global_shape:
        raise ContractError(f"array shape {array.shape} is not {part.global_shape}")
    workers = max(part.members) + 1 if workers is None else workers
    return [array[part.bulk_range(r).slices()].copy() if r in part else None
            for r in range(workers)]


def assemble(part: Partition, blocks: Sequence) -> np.ndarray:
    """Inverse of :func:`split`: place each member's block into a global array."""
    first = next(blocks[r] for r in part.members)
    out = np.zeros(part.global_shape, dtype=first.dtype)
    for r, rng in part.items():
        b = blocks[r]
        if b is None or tuple(b.shape) != rng.shape:
            raise ContractError(f"worker {r} block {None if b is None else b.shape} "
                                f"does not match {rng.shape}")
        out[rng.slices()] = b
    return out


@dataclass
class PartitionMap:
    """Non-empty overlaps of source and destination bulk regions, in global coordinates."""

    src: Partition
    dst: Partition
    pairs: dict[tuple[int, int], IndexRange]

    def sends(self, rank: int) -> list[tuple[int, IndexRange]]:
        return [(d, r) for (s, d), r in sorted(self.pairs.items()) if s == rank]

    def receives(self, rank: int) -> list[tuple[int, IndexRange]]:
        return [(s, r) for (s, d), r in sorted(self.pairs.items()) if d == rank]


def overlap(src: Partition, dst: Partition) -> PartitionMap:
    if src.global_shape != dst.global_shape:
        raise ContractError(
            f"repartition needs equal global shapes: {src.global_shape} vs {dst.global_shape}")
    pairs = {}
    for s, sr in src.items():
        for d, dr in dst.items():
            inter = sr.intersect(dr)
            if not inter.empty:
                pairs[(s, d)] = inter
    return PartitionMap(src, dst, pairs)


def broadcast_map(src, dst) -> list[tuple[int, list[int]]]:
    """Pair each source worker with the destination workers it broadcasts to.

    ``src`` and ``dst`` are partitions or rank grids.  The source grid must be
    the destination grid with some dimensions collapsed to extent 1; a lower
    rank source grid is left-padded with ones.  A source worker feeds every
    destination whose coordinates agree with its own in all non-collapsed
    dimensions.  Sum-reductions use the same map in reverse.
    """
    s = src.ranks if isinstance(src, Partition) else np.asarray(src, dtype=int)
    d = dst.ranks if isinstance(dst, Partition) else np.asarray(dst, dtype=int)
    if s.ndim > d.ndim:
        raise ContractError(f"source grid {s.shape} has higher rank than {d.shape}")
    s = s.reshape((1,) * (d.ndim - s.ndim) + s.shape)
    for ps, pd in zip(s.shape, d.shape):
        if ps != pd and ps != 1:
            raise ContractError(f"grid {s.shape} cannot broadcast to {d.shape}")
    out = []
    for c, r in np.ndenumerate(s):
        sel = tuple(ci if ps != 1 else slice(None) for ci, ps in zip(c, s.shape))
        group = sorted(int(v) for v in np.ravel(d[sel]))
        out.append((int(r), group))
    return out


def parse_grid(text: str) -> tuple[int, ...]:
    """Parse a comma separated grid such as ``1,2,2``."""
    try:
        grid = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ContractError(f"bad partition spec {text!r}") from None
    if not grid or any(p < 1 for p in grid):
        raise ContractError(f"bad partition spec {text!r}")
    return grid
