"""Distributed pooling, convolution, affine and transpose layers.

Each layer is instantiated once per worker inside an SPMD program and called
collectively.  Forward and backward are written out step by step from the
primitives in :mod:`linmove.comm` and :mod:`linmove.halo`; no data movement is
differentiated automatically.

Rank grids follow the layer algorithms: for convolution the work partition is
``1 x P_co x P_ci x P_0 x ...``, inputs live on ``1 x 1 x P_ci x P_0 x ...``
(viewed from the work grid), outputs on ``1 x P_co x 1 x P_0 x ...`` and weights
on ``P_co x P_ci``.  For the affine layer the work partition is
``P_fo x P_fi``, inputs live on its first row and outputs on its first column
by default.
"""
from __future__ import annotations

import numpy as np

from ..comm import broadcast_along, reduce_along, repartition
from ..halo import HaloExchanger, KernelSpec
from ..partition import Partition, broadcast_map
from ..tensor import ContractError
from . import local
from .core import Layer


def _row_major(shape) -> np.ndarray:
    return np.arange(int(np.prod(shape))).reshape(shape)


class DistPool(Layer):
    """Pooling over a ``1 x P_c x P_0 x ...`` partition: halo exchange, trim, local pool."""

    def __init__(self, comm, x_part: Partition, size, stride=None, dilation=1, padding=0,
                 mode: str = "max", name: str = "pool"):
        super().__init__()
        self.comm = comm
        self.name = name
        self.mode = mode
        lead = 2
        D = len(x_part.global_shape) - lead
        size = tuple(int(k) for k in np.broadcast_to(np.atleast_1d(size), (D,)))
        stride = size if stride is None else stride
        self.kernel = KernelSpec.spatial(lead, size, stride, dilation, padding)
        self.halo = HaloExchanger(comm, x_part, self.kernel, tag=f"{name}.halo")
        self.x_part = x_part
        self.y_part = self.halo.out_partition
        self.window = local.Window.from_kernel(self.halo.local_kernel(), lead) \
            if self.halo.active else None

    def forward(self, x):
        if not self.halo.active:
            return None, None
        buf = self.halo.allocate(x)
        self.halo.exchange(buf)
        xt = self.halo.trim(buf)
        return local.pool_local(xt, self.window, self.mode)

    def backward(self, ctx, dy):
        if not self.halo.active:
            return None
        dxt = local.pool_local_adjoint(dy, ctx)
        dbuf = self.halo.trim_adjoint(dxt)
        self.halo.exchange_adjoint(dbuf)
        return self.halo.deallocate(dbuf)


class DistConv(Layer):
    """Convolution with weights on ``P_r``, work on ``P_w`` and no explicit all-reduce.

    Forward: halo exchange on the input, broadcast weights, bias and input to
    the work partition, local convolution, sum-reduce onto the output
    partition.  The bias is broadcast only to the ``ci = 0`` slice of the work
    partition so the reduction over input channels counts it once.
    Backward mirrors this with broadcasts and reductions swapped.
    """

    def __init__(self, comm, x_part: Partition, n_co: int, kernel_size, *, p_co: int = 1,
                 work_ranks=None, y_ranks=None, weight_ranks=None, w=None, b=None,
                 stride=1, dilation=1, padding=0, name: str = "conv"):
        super().__init__()
        self.comm = comm
        self.name = name
        n_b, n_ci, *feat = x_part.global_shape
        _, p_ci, *p_feat = x_part.grid
        if x_part.grid[0] != 1:
            raise ContractError("batch dimension must not be partitioned")
        D = len(feat)
        ksize = tuple(int(k) for k in np.broadcast_to(np.atleast_1d(kernel_size), (D,)))
        self.kernel = KernelSpec.spatial(2, ksize, stride, dilation, padding)
        work_grid = (1, p_co, p_ci, *p_feat)
        if work_ranks is None:
            work_ranks = (x_part.ranks.reshape(work_grid) if p_co == 1
                          else _row_major(work_grid))
        work_ranks = np.asarray(work_ranks).reshape(work_grid)
        if y_ranks is None:
            y_ranks = work_ranks[:, :, 0]
        if weight_ranks is None:
            weight_ranks = work_ranks[(0, slice(None), slice(None)) + (0,) * D]
        weight_ranks = np.asarray(weight_ranks).reshape(p_co, p_ci)
        pad_feat = (1,) * D

        self.x_part = x_part
        self.halo = HaloExchanger(comm, x_part, self.kernel, tag=f"{name}.halo")
        y_shape = (n_b, n_co) + self.halo.out_partition.global_shape[2:]
        self.y_part = Partition(y_shape, (1, p_co, *p_feat), np.asarray(y_ranks))
        self.w_part = Partition((n_co, n_ci) + ksize, (p_co, p_ci) + (1,) * D,
                                weight_ranks.reshape((p_co, p_ci) + pad_feat))
        self.b_part = Partition((n_co,), (p_co,), weight_ranks[:, 0])
        self.work_ranks = work_ranks

        self.w_map = broadcast_map(weight_ranks.reshape((1, p_co, p_ci) + pad_feat), work_ranks)
        self.b_map = broadcast_map(weight_ranks[:, :1].reshape((1, p_co, 1) + pad_feat),
                                   work_ranks[:, :, :1])
        self.x_map = broadcast_map(x_part.ranks.reshape((1, 1, p_ci, *p_feat)), work_ranks)
        self.y_map = broadcast_map(self.y_part.ranks.reshape((1, p_co, 1, *p_feat)), work_ranks)

        rank = comm.rank
        self.is_work = rank in set(work_ranks.ravel().tolist())
        if self.is_work:
            src = next(s for s, g in self.x_map if rank in g)
            self.window = local.Window.from_kernel(self.halo.local_kernel(src), 2)
        if rank in self.w_part:
            if w is None or tuple(w.shape) != self.w_part.local_shape(rank):
                raise ContractError(f"{name}: worker {rank} needs a weight block of shape "
                                    f"{self.w_part.local_shape(rank)}")
        if rank in self.b_part:
            if b is None or tuple(b.shape) != self.b_part.local_shape(rank):
                raise ContractError(f"{name}: worker {rank} needs a bias block of shape "
                                    f"{self.b_part.local_shape(rank)}")
        self.params = {"w": w if rank in self.w_part else None,
                       "b": b if rank in self.b_part else None}
        self.zero_grad()

    def forward(self, x):
        comm, halo = self.comm, self.halo
        xt = None
        if halo.active:
            buf = halo.allocate(x)
            halo.exchange(buf)
            xt = halo.trim(buf)
        w_hat = broadcast_along(comm, self.params["w"], self.w_map, f"{self.name}.w")
        b_hat = broadcast_along(comm, self.params["b"], self.b_map, f"{self.name}.b")
        x_hat = broadcast_along(comm, xt, self.x_map, f"{self.name}.x")
        y_hat, cctx = None, None
        if self.is_work:
            y_hat, cctx = local.conv_local(w_hat, b_hat, x_hat, self.window)
        y = reduce_along(comm, y_hat, self.y_map, f"{self.name}.y")
        return y, cctx

    def backward(self, cctx, dy):
        comm, halo = self.comm, self.halo
        dy_hat = broadcast_along(comm, dy, self.y_map, f"{self.name}.dy")
        dw_hat = db_hat = dx_hat = None
        if self.is_work:
            dw_hat, db_hat, dx_hat = local.conv_local_adjoint(dy_hat, cctx)
        dxt = reduce_along(comm, dx_hat, self.x_map, f"{self.name}.dx")
        db = reduce_along(comm, db_hat, self.b_map, f"{self.name}.db")
        dw = reduce_along(comm, dw_hat, self.w_map, f"{self.name}.dw")
        self._accumulate("w", dw)
        self._accumulate("b", db)
        if not halo.active:
            return None
        dbuf = halo.trim_adjoint(dxt)
        halo.exchange_adjoint(dbuf)
        return halo.deallocate(dbuf)


class DistAffine(Layer):
    """Affine layer ``y = W x + b`` with ``W`` blocked over a ``P_fo x P_fi`` partition.

    The bias lives only on the ``fi = 0`` column of the weight partition.
    """

    def __init__(self, comm, n_fi: int, n_fo: int, weight_ranks, *, x_ranks=None, y_ranks=None,
                 w=None, b=None, name: str = "affine"):
        super().__init__()
        self.comm = comm
        self.name = name
        weight_ranks = np.asarray(weight_ranks)
        if weight_ranks.ndim != 2:
            raise ContractError("affine weight partition must be two-dimensional")
        p_fo, p_fi = weight_ranks.shape
        x_ranks = weight_ranks[0, :] if x_ranks is None else np.asarray(x_ranks).ravel()
        y_ranks = weight_ranks[:, 0] if y_ranks is None else np.asarray(y_ranks).ravel()
        if x_ranks.size != p_fi or y_ranks.size != p_fo:
            raise ContractError("input/output partitions do not match the weight partition")
        self.n_fi, self.n_fo = n_fi, n_fo
        self.w_part = Partition((n_fo, n_fi), (p_fo, p_fi), weight_ranks)
        self.b_part = Partition((n_fo,), (p_fo,), weight_ranks[:, 0])
        self.x_ranks, self.y_ranks = x_ranks, y_ranks
        self.x_map = broadcast_map(x_ranks.reshape(1, p_fi), weight_ranks)
        self.y_map = broadcast_map(y_ranks.reshape(p_fo, 1), weight_ranks)
        rank = comm.rank
        self.is_work = rank in self.w_part
        if self.is_work and (w is None or tuple(w.shape) != self.w_part.local_shape(rank)):
            raise ContractError(f"{name}: worker {rank} needs a weight block of shape "
                                f"{self.w_part.local_shape(rank)}")
        if rank in self.b_part and (b is None or tuple(b.shape) != self.b_part.local_shape(rank)):
            raise ContractError(f"{name}: worker {rank} needs a bias block of shape "
                                f"{self.b_part.local_shape(rank)}")
        self.params = {"w": w if self.is_work else None,
                       "b": b if rank in self.b_part else None}
        self.zero_grad()

    def x_partition(self, n_b: int) -> Partition:
        return Partition((n_b, self.n_fi), (1, self.x_ranks.size), self.x_ranks)

    def y_partition(self, n_b: int) -> Partition:
        return Partition((n_b, self.n_fo), (1, self.y_ranks.size), self.y_ranks)

    def forward(self, x):
        comm = self.comm
        x_hat = broadcast_along(comm, x, self.x_map, f"{self.name}.x")
        y_hat, actx = None, None
        if self.is_work:
            y_hat, actx = local.affine_local(self.params["w"], self.params["b"], x_hat)
        y = reduce_along(comm, y_hat, self.y_map, f"{self.name}.y")
        return y, actx

    def backward(self, actx, dy):
        comm = self.comm
        dy_hat = broadcast_along(comm, dy, self.y_map, f"{self.name}.dy")
        dx_hat = None
        if self.is_work:
            dw, db, dx_hat = local.affine_local_adjoint(dy_hat, actx)
            self._accumulate("w", dw)
            self._accumulate("b", db)
        return reduce_along(comm, dx_hat, self.x_map, f"{self.name}.dx")


class DistTranspose(Layer):
    """Repartition between two partitions of the same global shape."""

    def __init__(self, comm, src: Partition, dst: Partition, name: str = "transpose"):
        super().__init__()
        if src.global_shape != dst.global_shape:
            raise ContractError(f"{name}: shapes {src.global_shape} and {dst.global_shape} differ")
        self.comm = comm
        self.name = name
        self.src, self.dst = src, dst

    def forward(self, x):
        return repartition(self.comm, x, self.src, self.dst, f"{self.name}"), None

    def backward(self, ctx, dy):
        return repartition(self.comm, dy, self.dst, self.src, f"{self.name}*")
