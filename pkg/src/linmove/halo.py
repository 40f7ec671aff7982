"""Unbalanced halo geometry and the nested forward/adjoint halo exchange.

Geometry is output driven: each worker owns a balanced block of the layer's
*output*, and the input it needs follows from the kernel footprint.  Comparing
that footprint with the worker's balanced block of the *input* yields, per
dimension and side, either a halo (data owned by the adjacent neighbor) or a
trim (local data no output touches).

Kernels are left-anchored: output ``o`` reads inputs
``o*stride - pad_left + j*dilation`` for ``j`` in ``range(size)``.  A centered
kernel is the same footprint with symmetric padding.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .partition import Partition
from .tensor import ContractError, IndexRange


def _per_dim(v, ndim: int, name: str) -> tuple[int, ...]:
    if np.isscalar(v):
        return (int(v),) * ndim
    v = tuple(int(e) for e in v)
    if len(v) != ndim:
        raise ContractError(f"{name} has {len(v)} entries, expected {ndim}")
    return v


@dataclass(frozen=True)
class KernelSpec:
    size: tuple[int, ...]
    stride: tuple[int, ...]
    dilation: tuple[int, ...]
    pad_left: tuple[int, ...]
    pad_right: tuple[int, ...]
    centered: bool = False

    def __post_init__(self):
        n = len(self.size)
        if not all(len(v) == n for v in (self.stride, self.dilation, self.pad_left, self.pad_right)):
            raise ContractError("kernel parameters disagree in rank")
        if min(self.size + self.stride + self.dilation, default=1) < 1:
            raise ContractError("kernel size, stride and dilation must be >= 1")
        if min(self.pad_left + self.pad_right, default=0) < 0:
            raise ContractError("padding must be >= 0")

    @classmethod
    def make(cls, ndim: int, size, stride=1, dilation=1, padding=0, pad_right=None,
             centered: bool = False) -> "KernelSpec":
        pl = _per_dim(padding, ndim, "padding")
        pr = pl if pad_right is None else _per_dim(pad_right, ndim, "pad_right")
        return cls(_per_dim(size, ndim, "size"), _per_dim(stride, ndim, "stride"),
                   _per_dim(dilation, ndim, "dilation"), pl, pr, centered)

    @classmethod
    def spatial(cls, leading: int, size, stride=1, dilation=1, padding=0) -> "KernelSpec":
        """Kernel acting on trailing feature dimensions, identity on ``leading`` dims."""
        size = tuple(np.atleast_1d(size))
        d = len(size)

        def lift(v, fill):
            return (fill,) * leading + _per_dim(v, d, "param")

        return cls(lift(size, 1), lift(stride, 1), lift(dilation, 1),
                   lift(padding, 0), lift(padding, 0))

    @property
    def ndim(self) -> int:
        return len(self.size)

    def footprint(self, dim: int) -> int:
        return self.dilation[dim] * (self.size[dim] - 1) + 1

    def output_shape(self, in_shape: Sequence[int]) -> tuple[int, ...]:
        out = []
        for i, n in enumerate(in_shape):
            span = n + self.pad_left[i] + self.pad_right[i] - self.footprint(i)
            if span < 0:
                raise ContractError(f"kernel window exceeds input extent {n} in dim {i}")
            out.append(span // self.stride[i] + 1)
        return tuple(out)


def _needed(o_lo: int, o_hi: int, k: KernelSpec, i: int) -> tuple[int, int]:
    """Unclipped half-open input interval read by outputs ``[o_lo, o_hi)`` in dim ``i``."""
    lo = o_lo * k.stride[i] - k.pad_left[i]
    hi = (o_hi - 1) * k.stride[i] - k.pad_left[i] + k.footprint(i)
    return lo, hi


def required_input_range(output_range: IndexRange, kernel: KernelSpec,
                         input_shape: Sequence[int] | None = None) -> IndexRange:
    """Input indices touched by the kernel footprints of ``output_range``.

    Without ``input_shape`` the range is unclipped and may reach into the
    padding (negative or past the end); with it, the range is clipped to the
    real input.
    """
    if output_range.ndim != kernel.ndim:
        raise ContractError("range and kernel disagree in rank")
    pairs = []
    for i, (a, b) in enumerate(zip(output_range.start, output_range.stop)):
        if a == b:
            lo, hi = 0, 0
        else:
            lo, hi = _needed(a, b, kernel, i)
            if input_shape is not None:
                lo, hi = max(lo, 0), min(hi, input_shape[i])
                hi = max(lo, hi)
        pairs.append((lo, hi))
    return IndexRange.from_pairs(pairs)


@dataclass(frozen=True)
class HaloSpec:
    left_halo: tuple[int, ...]
    right_halo: tuple[int, ...]
    left_trim: tuple[int, ...]
    right_trim: tuple[int, ...]

    def __post_init__(self):
        for lh, rh, lt, rt in zip(self.left_halo, self.right_halo, self.left_trim, self.right_trim):
            if min(lh, rh, lt, rt) < 0:
                raise ContractError("halo and trim widths must be non-negative")
            if lh and lt or rh and rt:
                raise ContractError("a side cannot have both a halo and a trim")

    @classmethod
    def none(cls, ndim: int) -> "HaloSpec":
        z = (0,) * ndim
        return cls(z, z, z, z)

    def rows(self):
        return list(zip(self.left_halo, self.right_halo, self.left_trim, self.right_trim))


def compute_halo(global_in_shape: Sequence[int], kernel: KernelSpec, in_partition: Partition,
                 out_partition: Partition, worker: int) -> HaloSpec:
    """Halo and trim widths for ``worker``'s block of the input."""
    if in_partition.grid != out_partition.grid:
        raise ContractError(f"input grid {in_partition.grid} and output grid "
                            f"{out_partition.grid} differ")
    if tuple(global_in_shape) != in_partition.global_shape:
        raise ContractError("input partition does not match the input shape")
    if kernel.output_shape(global_in_shape) != out_partition.global_shape:
        raise ContractError("output partition does not match the kernel's output shape")
    coords = in_partition.coords(worker)
    lh, rh, lt, rt = [], [], [], []
    for i, n in enumerate(global_in_shape):
        c = coords[i]
        o_lo, o_hi = out_partition.dim_bounds(i)[c]
        need_lo, need_hi = _needed(o_lo, o_hi, kernel, i)
        need_lo, need_hi = max(need_lo, 0), min(need_hi, n)
        bounds = in_partition.dim_bounds(i)
        b_lo, b_hi = bounds[c]
        size = b_hi - b_lo
        left_halo, left_trim = max(0, b_lo - need_lo), max(0, need_lo - b_lo)
        right_halo, right_trim = max(0, need_hi - b_hi), max(0, b_hi - need_hi)
        if left_trim >= size or right_trim >= size:
            raise ContractError(
                f"partition too fine for kernel: worker {worker} dim {i} needs inputs "
                f"[{need_lo},{need_hi}) but owns [{b_lo},{b_hi})")
        if left_halo and (c == 0 or left_halo > bounds[c - 1][1] - bounds[c - 1][0]):
            raise ContractError(f"partition too fine for kernel: worker {worker} dim {i} "
                                f"needs a left halo of {left_halo} beyond its neighbor")
        if right_halo and (c == len(bounds) - 1
                           or right_halo > bounds[c + 1][1] - bounds[c + 1][0]):
            raise ContractError(f"partition too fine for kernel: worker {worker} dim {i} "
                                f"needs a right halo of {right_halo} beyond its neighbor")
        lh.append(left_halo)
        rh.append(right_halo)
        lt.append(left_trim)
        rt.append(right_trim)
    return HaloSpec(tuple(lh), tuple(rh), tuple(lt), tuple(rt))


def trim_shim(x: np.ndarray, spec: HaloSpec) -> np.ndarray:
    """Drop the unneeded entries at each side of each dimension."""
    sl = []
    for n, lt, rt in zip(x.shape, spec.left_trim, spec.right_trim):
        if lt + rt > n:
            raise ContractError(f"trim ({lt}, {rt}) exceeds local extent {n}")
        sl.append(slice(lt, n - rt))
    return x[tuple(sl)].copy()


def trim_shim_adjoint(dy: np.ndarray, spec: HaloSpec) -> np.ndarray:
    """Reinsert zeros where :func:`trim_shim` dropped entries."""
    shape = tuple(n + lt + rt for n, lt, rt in zip(dy.shape, spec.left_trim, spec.right_trim))
    out = np.zeros(shape, dtype=dy.dtype)
    out[tuple(slice(lt, lt + n) for n, lt in zip(dy.shape, spec.left_trim))] = dy
    return out


class HaloExchanger:
    """Per-worker driver of the halo exchange for one layer.

    The local buffer is the bulk block padded by the halo widths.  In the
    forward exchange dimensions are processed in ascending order and the packed
    strips span the already exchanged halos of earlier dimensions, so corner
    data arrives without diagonal messages.  The adjoint runs dimensions in
    descending order, sends halo cotangents back, adds them into the
    neighbor's bulk and clears the local halo.
    """

    def __init__(self, comm, in_partition: Partition, kernel: KernelSpec, tag: str = "halo"):
        self.comm = comm
        self.part = in_partition
        self.kernel = kernel
        self.in_shape = in_partition.global_shape
        self.out_partition = in_partition.with_shape(kernel.output_shape(self.in_shape))
        self.tag = tag
        self._specs: dict[int, HaloSpec] = {}
        self.active = comm.rank in in_partition
        if self.active:
            self.spec = self.spec_of(comm.rank)
            self.bulk_shape = in_partition.bulk_range(comm.rank).shape

    def spec_of(self, rank: int) -> HaloSpec:
        if rank not in self._specs:
            self._specs[rank] = compute_halo(self.in_shape, self.kernel, self.part,
                                             self.out_partition, rank)
        return self._specs[rank]

    @property
    def buffer_shape(self) -> tuple[int, ...]:
        s = self.spec
        return tuple(b + l + r for b, l, r in zip(self.bulk_shape, s.left_halo, s.right_halo))

    def _bulk_slices(self):
        return tuple(slice(l, l + b) for l, b in zip(self.spec.left_halo, self.bulk_shape))

    def allocate(self, x: np.ndarray) -> np.ndarray:
        if not self.active:
            return None
        if tuple(x.shape) != self.bulk_shape:
            raise ContractError(f"worker {self.comm.rank}: block {x.shape} is not its bulk "
                                f"{self.bulk_shape}")
        buf = np.zeros(self.buffer_shape, dtype=x.dtype)
        buf[self._bulk_slices()] = x
        return buf

    def deallocate(self, buf: np.ndarray) -> np.ndarray:
        if not self.active:
            return None
        return buf[self._bulk_slices()].copy()

    def _span(self, buf, dim: int, lo: int, hi: int):
        """Region ``[lo, hi)`` in ``dim``; earlier dims full, later dims bulk only."""
        s = self.spec
        sl = []
        for j, n in enumerate(buf.shape):
            if j < dim:
                sl.append(slice(0, n))
            elif j == dim:
                sl.append(slice(lo, hi))
            else:
                sl.append(slice(s.left_halo[j], s.left_halo[j] + self.bulk_shape[j]))
        return tuple(sl)

    def _neighbors(self, dim: int):
        r = self.comm.rank
        return self.part.neighbor(r, dim, -1), self.part.neighbor(r, dim, +1)

    def exchange(self, buf: np.ndarray) -> np.ndarray:
        """Fill the halo regions of ``buf`` in place from the neighbors' bulk."""
        if not self.active:
            return None
        s, comm = self.spec, self.comm
        for dim in range(buf.ndim):
            left, right = self._neighbors(dim)
            lh, b = s.left_halo[dim], self.bulk_shape[dim]
            tag = f"{self.tag}.{dim}"
            if left is not None:
                w = self.spec_of(left).right_halo[dim]
                if w:
                    comm.send(buf[self._span(buf, dim, lh, lh + w)], left, tag + "<")
            if right is not None:
                w = self.spec_of(right).left_halo[dim]
                if w:
                    comm.send(buf[self._span(buf, dim, lh + b - w, lh + b)], right, tag + ">")
            if left is not None and lh:
                buf[self._span(buf, dim, 0, lh)] = comm.recv(left, tag + ">")
            rh = s.right_halo[dim]
            if right is not None and rh:
                buf[self._span(buf, dim, lh + b, lh + b + rh)] = comm.recv(right, tag + "<")
        return buf

    def exchange_adjoint(self, buf: np.ndarray) -> np.ndarray:
        """Send halo cotangents home, add them into the bulk, clear the halos (in place)."""
        if not self.active:
            return None
        s, comm = self.spec, self.comm
        for dim in reversed(range(buf.ndim)):
            left, right = self._neighbors(dim)
            lh, rh, b = s.left_halo[dim], s.right_halo[dim], self.bulk_shape[dim]
            tag = f"{self.tag}*.{dim}"
            if left is not None and lh:
                region = self._span(buf, dim, 0, lh)
                comm.send(buf[region], left, tag + "<")
                buf[region] = 0
            if right is not None and rh:
                region = self._span(buf, dim, lh + b, lh + b + rh)
                comm.send(buf[region], right, tag + ">")
                buf[region] = 0
            if right is not None:
                w = self.spec_of(right).left_halo[dim]
                if w:
                    buf[self._span(buf, dim, lh + b - w, lh + b)] += comm.recv(right, tag + "<")
            if left is not None:
                w = self.spec_of(left).right_halo[dim]
                if w:
                    buf[self._span(buf, dim, lh, lh + w)] += comm.recv(left, tag + ">")
        return buf

    def trim(self, buf: np.ndarray) -> np.ndarray:
        return None if not self.active else trim_shim(buf, self.spec)

    def trim_adjoint(self, dy: np.ndarray) -> np.ndarray:
        return None if not self.active else trim_shim_adjoint(dy, self.spec)

    def local_kernel(self, rank: int | None = None) -> KernelSpec:
        """Kernel for a worker's trimmed buffer, padded only at global boundaries."""
        k = self.kernel
        r = self.out_partition.bulk_range(self.comm.rank if rank is None else rank)
        pl, pr = [], []
        for i, n in enumerate(self.in_shape):
            lo, hi = _needed(r.start[i], r.stop[i], k, i)
            pl.append(max(0, -lo))
            pr.append(max(0, hi - n))
        return KernelSpec(k.size, k.stride, k.dilation, tuple(pl), tuple(pr))

    def output_range(self) -> IndexRange:
        return self.out_partition.bulk_range(self.comm.rank)
