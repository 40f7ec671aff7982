"""Named linear operators for the adjoint-test suite.

Collective primitives are wrapped as host-level :class:`LinearOp` objects whose
domain and codomain are lists of per-worker tensors; each application spawns
the worker group and runs the primitive's forward or adjoint program.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import comm as C
from .comm import spawn
from .halo import HaloExchanger, KernelSpec, trim_shim, trim_shim_adjoint, HaloSpec
from .layers.distributed import DistAffine, DistConv, DistPool, DistTranspose
from .memory_ops import (LinearOp, SubsetPair, add_op, allocate_op, clear_op, copy_op,
                         deallocate_op, identity_op, move_op)
from .partition import Partition, decompose
from .tensor import ContractError


def collective_op(name: str, k: int, fwd: Callable, adj: Callable, domain, codomain,
                  timeout: float | None = None) -> LinearOp:
    """Wrap per-worker programs ``fwd(comm, x)``/``adj(comm, y)`` as one operator."""

    def run(program, xs):
        return spawn(k, lambda comm: program(comm, xs[comm.rank]), timeout=timeout)

    return LinearOp(name, lambda xs: run(fwd, xs), lambda ys: run(adj, ys), domain, codomain,
                    meta={"workers": k})


def _only(rank: int, k: int, shape):
    return [tuple(shape) if r == rank else None for r in range(k)]


def send_recv_op(shape, src: int = 0, dst: int = 1, k: int = 2) -> LinearOp:
    shape = tuple(shape)
    return collective_op(
        "send-recv", k,
        lambda c, x: C.send_recv(c, x, src, dst),
        lambda c, y: C.send_recv_adjoint(c, y, src, dst),
        _only(src, k, shape), [shape if r in (src, dst) else None for r in range(k)])


def _blocks(shape, k):
    part = decompose(shape, (k,) + (1,) * (len(shape) - 1))
    return {r: rng for r, rng in part.items()}


def scatter_op(shape, k: int, root: int = 0) -> LinearOp:
    shape = tuple(shape)
    ranges = _blocks(shape, k)
    return collective_op(
        "scatter", k,
        lambda c, x: C.scatter(c, x, root, ranges),
        lambda c, y: C.scatter_adjoint(c, y, root, ranges, shape),
        _only(root, k, shape), [ranges[r].shape for r in range(k)])


def gather_op(shape, k: int, root: int = 0) -> LinearOp:
    shape = tuple(shape)
    ranges = _blocks(shape, k)
    return collective_op(
        "gather", k,
        lambda c, x: C.gather(c, x, root, ranges, shape),
        lambda c, y: C.gather_adjoint(c, y, root, ranges),
        [ranges[r].shape for r in range(k)], _only(root, k, shape))


def broadcast_op(shape, k: int, root: int = 0) -> LinearOp:
    shape = tuple(shape)
    group = list(range(k))
    return collective_op(
        f"broadcast[k={k}]", k,
        lambda c, x: C.broadcast(c, x, root, group),
        lambda c, y: C.broadcast_adjoint(c, y, root, group),
        _only(root, k, shape), [shape] * k)


def broadcast_wrong_adjoint_op(shape, k: int, root: int = 0) -> LinearOp:
    """Negative control: broadcast paired with broadcast instead of sum-reduce."""
    shape = tuple(shape)
    group = list(range(k))

    def wrong(c, y):
        out = C.broadcast(c, y if c.rank == root else None, root, group, tag="bcast-bad")
        return out if c.rank == root else None

    return collective_op(
        f"broadcast-wrong-adjoint[k={k}]", k,
        lambda c, x: C.broadcast(c, x, root, group), wrong,
        _only(root, k, shape), [shape] * k)


def sum_reduce_op(shape, k: int, root: int = 0) -> LinearOp:
    shape = tuple(shape)
    group = list(range(k))
    return collective_op(
        f"sum-reduce[k={k}]", k,
        lambda c, x: C.sum_reduce(c, x, root, group),
        lambda c, y: C.sum_reduce_adjoint(c, y, root, group),
        [shape] * k, _only(root, k, shape))


def all_reduce_op(shape, k: int) -> LinearOp:
    shape = tuple(shape)
    group = list(range(k))
    return collective_op(
        f"all-reduce[k={k}]", k,
        lambda c, x: C.all_reduce(c, x, group),
        lambda c, y: C.all_reduce_adjoint(c, y, group),
        [shape] * k, [shape] * k)


def repartition_op(src: Partition, dst: Partition, k: int | None = None) -> LinearOp:
    k = k or max(src.members + dst.members) + 1
    return collective_op(
        "repartition", k,
        lambda c, x: C.repartition(c, x, src, dst),
        lambda c, y: C.repartition_adjoint(c, y, src, dst),
        [src.local_shape(r) for r in range(k)], [dst.local_shape(r) for r in range(k)])


def halo_exchange_op(part: Partition, kernel: KernelSpec, name: str = "halo-exchange",
                     k: int | None = None) -> LinearOp:
    """The in-place exchange ``H`` acting on each worker's bulk+halo buffer."""
    k = k or max(part.members) + 1
    shapes = spawn(k, lambda c: HaloExchanger(c, part, kernel).buffer_shape
                   if c.rank in part else None)

    def fwd(c, buf):
        return HaloExchanger(c, part, kernel).exchange(None if buf is None else buf.copy())

    def adj(c, buf):
        return HaloExchanger(c, part, kernel).exchange_adjoint(None if buf is None else buf.copy())

    return collective_op(name, k, fwd, adj, shapes, shapes)


def asymmetric_halo_case():
    """Rank-2 tensor on a 2x2 grid with unequal interior halos.

    Rows: the top row needs a width-2 halo from below, the bottom row a width-4
    halo from above.  Columns: the right column needs width 3 from the left one,
    the left column needs nothing.
    """
    shape = (17, 13)
    kernel = KernelSpec((7, 4), (1, 1), (1, 1), (1, 3), (0, 0))
    return decompose(shape, (2, 2)), kernel


def trim_shim_op(shape, spec: HaloSpec) -> LinearOp:
    shape = tuple(shape)
    out = tuple(n - l - r for n, l, r in zip(shape, spec.left_trim, spec.right_trim))
    return LinearOp("trim-shim", lambda x: trim_shim(x, spec),
                    lambda y: trim_shim_adjoint(y, spec), shape, out)


def dist_pool_avg_op(x_part: Partition, size, stride=None, k: int | None = None) -> LinearOp:
    k = k or max(x_part.members) + 1

    def layer(c):
        return DistPool(c, x_part, size, stride, mode="avg")

    out_shapes = spawn(k, lambda c: layer(c).y_part.local_shape(c.rank))

    def fwd(c, x):
        return layer(c).forward(x)[0]

    def adj(c, dy):
        lay = layer(c)
        # average pooling's context is input-independent; a zero forward recovers it
        zero = None if c.rank not in x_part else np.zeros(x_part.local_shape(c.rank))
        _, ctx = lay.forward(zero)
        return lay.backward(ctx, dy)

    return collective_op("dist-pool[avg]", k, fwd, adj,
                         [x_part.local_shape(r) for r in range(k)], out_shapes)


def dist_conv_op(x_part: Partition, n_co: int, kernel_size, weights: np.ndarray, p_co: int = 1,
                 k: int | None = None, padding=0) -> LinearOp:
    """Distributed convolution as a linear map of its input (fixed weights, zero bias)."""
    n_ci = x_part.global_shape[1]
    if weights.shape[:2] != (n_co, n_ci):
        raise ContractError("weight shape does not match channels")

    def layer(c):
        probe = DistConv(c, x_part, n_co, kernel_size, p_co=p_co, padding=padding,
                         w=_weight_block(x_part, n_co, kernel_size, p_co, weights, c.rank),
                         b=_bias_block(x_part, n_co, kernel_size, p_co, c.rank))
        return probe

    ks = max(x_part.members) + 1
    k = k or max(ks, p_co * x_part.size)
    out_shapes = spawn(k, lambda c: layer(c).y_part.local_shape(c.rank))

    def fwd(c, x):
        y, _ = layer(c).forward(x)
        return y

    def adj(c, dy):
        lay = layer(c)
        # the adjoint only needs the checkpointed weights, not the input values
        zero = None if c.rank not in x_part else np.zeros(x_part.local_shape(c.rank))
        _, ctx = lay.forward(zero)
        return lay.backward(ctx, dy)

    return collective_op(f"dist-conv[p_co={p_co}]", k, fwd, adj,
                         [x_part.local_shape(r) for r in range(k)], out_shapes)


def conv_placement(x_part, n_co, kernel_size, p_co):
    """Weight partition the default :class:`DistConv` rank layout produces."""
    p_ci = x_part.grid[1]
    D = len(x_part.grid) - 2
    work_grid = (1, p_co, p_ci, *x_part.grid[2:])
    work = (x_part.ranks.reshape(work_grid) if p_co == 1
            else np.arange(int(np.prod(work_grid))).reshape(work_grid))
    wr = work[(0, slice(None), slice(None)) + (0,) * D]
    ks = tuple(np.broadcast_to(np.atleast_1d(kernel_size), (D,)))
    return Partition((n_co, x_part.global_shape[1]) + ks, (p_co, p_ci) + (1,) * D,
                     wr.reshape((p_co, p_ci) + (1,) * D)), wr


def _weight_block(x_part, n_co, kernel_size, p_co, weights, rank):
    wp, _ = conv_placement(x_part, n_co, kernel_size, p_co)
    if rank not in wp:
        return None
    return weights[wp.bulk_range(rank).slices()].copy()


def _bias_block(x_part, n_co, kernel_size, p_co, rank):
    _, wr = conv_placement(x_part, n_co, kernel_size, p_co)
    bp = Partition((n_co,), (p_co,), wr[:, 0])
    return None if rank not in bp else np.zeros(bp.local_shape(rank))


def dist_affine_op(n_b: int, weights: np.ndarray, weight_ranks) -> LinearOp:
    weight_ranks = np.asarray(weight_ranks)
    n_fo, n_fi = weights.shape
    wp = Partition((n_fo, n_fi), weight_ranks.shape, weight_ranks)
    bp = Partition((n_fo,), (weight_ranks.shape[0],), weight_ranks[:, 0])
    k = int(weight_ranks.max()) + 1

    def layer(c):
        w = weights[wp.bulk_range(c.rank).slices()].copy() if c.rank in wp else None
        b = np.zeros(bp.local_shape(c.rank)) if c.rank in bp else None
        return DistAffine(c, n_fi, n_fo, weight_ranks, w=w, b=b)

    xs = spawn(k, lambda c: layer(c).x_partition(n_b).local_shape(c.rank))
    ys = spawn(k, lambda c: layer(c).y_partition(n_b).local_shape(c.rank))

    def fwd(c, x):
        return layer(c).forward(x)[0]

    def adj(c, dy):
        lay = layer(c)
        ctx = None
        if lay.is_work:
            src = next(s for s, g in lay.x_map if c.rank in g)
            n_x = lay.x_partition(n_b).local_shape(src)
            ctx = (np.zeros(n_x), lay.params["w"], lay.params["b"] is not None)
        return lay.backward(ctx, dy)

    return collective_op("dist-affine", k, fwd, adj, xs, ys)


def dist_transpose_op(src: Partition, dst: Partition) -> LinearOp:
    k = max(src.members + dst.members) + 1
    return collective_op(
        "dist-transpose", k,
        lambda c, x: DistTranspose(c, src, dst).forward(x)[0],
        lambda c, y: DistTranspose(c, src, dst).backward(None, y),
        [src.local_shape(r) for r in range(k)], [dst.local_shape(r) for r in range(k)])


def standard_suite(workers: int = 4, n: int = 7, seed: int = 0) -> list[LinearOp]:
    """Every primitive plus the linear data-movement parts of each distributed layer."""
    rng = np.random.default_rng(seed)
    k = max(2, workers)
    m = max(n, 4)
    half = m // 2
    ops = [
        identity_op((m,)),
        allocate_op(m, 3),
        deallocate_op(m, (1, 3)),
        clear_op(m, (1, 3)),
        add_op(m, SubsetPair((0, half), (half, 2 * half))),
        copy_op(m, SubsetPair((0, half), (half, 2 * half)), "in_place"),
        copy_op(m, SubsetPair((1, 3), (m, m + 2)), "out_of_place"),
        move_op(m, SubsetPair((0, half), (half, 2 * half)), "in_place"),
        move_op(m, SubsetPair((1, 3), (m, m + 2)), "out_of_place"),
        send_recv_op((m,), 0, 1, k),
        scatter_op((m, 3), k),
        gather_op((m, 3), k),
    ]
    ops += [broadcast_op((m,), kk) for kk in (2, 3, 5)]
    ops += [sum_reduce_op((m,), k), all_reduce_op((m,), k)]
    src = decompose((m + 5, 6), (k, 1))
    dst = decompose((m + 5, 6), (1, 2), ranks=[k - 1, 0])
    ops.append(repartition_op(src, dst, k))
    part, kernel = asymmetric_halo_case()
    ops.append(halo_exchange_op(part, kernel, "halo-exchange[2x2]"))
    ops.append(halo_exchange_op(decompose((20,), (6,)), KernelSpec.make(1, 2, 2),
                                "halo-exchange[n=20,P=6]"))
    ops.append(trim_shim_op((5, 6), HaloSpec((0, 0), (0, 0), (1, 0), (2, 1))))
    ops.append(dist_pool_avg_op(decompose((2, 3, 10, 9), (1, 1, 2, 2)), 2))
    ops.append(dist_conv_op(decompose((2, 2, 9, 8), (1, 2, 2, 1)), 3, 3,
                            rng.uniform(-1, 1, (3, 2, 3, 3)), p_co=2, k=8))
    ops.append(dist_affine_op(3, rng.uniform(-1, 1, (5, 7)), np.arange(4).reshape(2, 2)))
    ops.append(dist_transpose_op(decompose((2, 4, 6, 6), (1, 1, 2, 2)),
                                 decompose((2, 4, 6, 6), (1, 2, 1, 1), ranks=[0, 1])))
    return ops


def named_op(name: str, workers: int = 4, shape=(7,), seed: int = 0) -> LinearOp:
    """Build a single operator by name (CLI ``adjoint-test --op``)."""
    shape = tuple(shape)
    n = shape[0]
    k = workers
    builders = {
        "identity": lambda: identity_op(shape),
        "allocate": lambda: allocate_op(n, 2),
        "deallocate": lambda: deallocate_op(n, (0, min(2, n))),
        "clear": lambda: clear_op(n, (0, n // 2)),
        "add": lambda: add_op(n, SubsetPair((0, n // 2), (n // 2, 2 * (n // 2)))),
        "copy": lambda: copy_op(n, SubsetPair((0, n // 2), (n // 2, 2 * (n // 2)))),
        "move": lambda: move_op(n, SubsetPair((0, n // 2), (n // 2, 2 * (n // 2)))),
        "send-recv": lambda: send_recv_op(shape, 0, 1, max(k, 2)),
        "scatter": lambda: scatter_op(shape, k),
        "gather": lambda: gather_op(shape, k),
        "broadcast": lambda: broadcast_op(shape, k),
        "broadcast-wrong-adjoint": lambda: broadcast_wrong_adjoint_op(shape, k),
        "sum-reduce": lambda: sum_reduce_op(shape, k),
        "all-reduce": lambda: all_reduce_op(shape, k),
        "repartition": lambda: repartition_op(decompose(shape, (k,) + (1,) * (len(shape) - 1)),
                                              decompose(shape, (1,) * len(shape)), k),
        "halo-exchange": lambda: halo_exchange_op(*asymmetric_halo_case()),
    }
    if name not in builders:
        raise ContractError(f"unknown operator {name!r}; choose from {sorted(builders)}")
    return builders[name]()


OP_NAMES = ("identity", "allocate", "deallocate", "clear", "add", "copy", "move", "send-recv",
            "scatter", "gather", "broadcast", "broadcast-wrong-adjoint", "sum-reduce",
            "all-reduce", "repartition", "halo-exchange")
