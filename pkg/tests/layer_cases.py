"""Distributed-vs-sequential comparisons for single layers.

Each ``*_case`` runs one distributed layer forward and backward on the
simulated workers, assembles the distributed results, and compares them with
the sequential kernels applied to the assembled global tensors.  The result
is a dict of relative errors keyed by quantity.
"""
from __future__ import annotations

import numpy as np

from linmove.catalog import conv_placement
from linmove.comm import spawn
from linmove.halo import KernelSpec, compute_halo
from linmove.layers import DistAffine, DistConv, DistPool, DistTranspose, Window
from linmove.layers.local import (affine_local, affine_local_adjoint, conv_local,
                                  conv_local_adjoint, pool_local, pool_local_adjoint)
from linmove.partition import Partition, assemble, decompose, split
from linmove.tensor import ContractError, rel_error


def geometry_ok(shape, kernel: KernelSpec, part: Partition) -> bool:
    try:
        out = part.with_shape(kernel.output_shape(shape))
        for w in part.members:
            compute_halo(shape, kernel, part, out, w)
    except ContractError:
        return False
    return True


def _collect(results, key, part):
    return assemble(part, [None if r is None else r[key] for r in results])


def pool_case(shape, grid, size, stride, mode, seed):
    rng = np.random.default_rng(seed)
    part = decompose(shape, grid)
    x = rng.uniform(-1, 1, shape)
    win = Window.make((size,) * (len(shape) - 2), stride)
    y_seq, ctx = pool_local(x, win, mode)
    dy = rng.uniform(-1, 1, y_seq.shape)
    dx_seq = pool_local_adjoint(dy, ctx)
    x_blocks = split(part, x)
    y_part = part.with_shape(y_seq.shape)
    dy_blocks = split(y_part, dy)

    def prog(c):
        lay = DistPool(c, part, size, stride, mode=mode)
        y, lctx = lay.forward(x_blocks[c.rank])
        return {"y": y, "dx": lay.backward(lctx, dy_blocks[c.rank])}

    out = spawn(part.size, prog)
    return {"y": rel_error(_collect(out, "y", y_part), y_seq),
            "dx": rel_error(_collect(out, "dx", part), dx_seq)}


def conv_case(shape, grid, n_co, ksize, p_co, padding, seed):
    rng = np.random.default_rng(seed)
    part = decompose(shape, grid)
    D = len(shape) - 2
    ks = (ksize,) * D if np.isscalar(ksize) else tuple(ksize)
    w = rng.uniform(-1, 1, (n_co, shape[1]) + ks)
    b = rng.uniform(-1, 1, n_co)
    x = rng.uniform(-1, 1, shape)
    win = Window.make(ks, 1, padding=padding)
    y_seq, ctx = conv_local(w, b, x, win)
    dy = rng.uniform(-1, 1, y_seq.shape)
    dw_seq, db_seq, dx_seq = conv_local_adjoint(dy, ctx)

    w_part, wr = conv_placement(part, n_co, ks, p_co)
    b_part = Partition((n_co,), (p_co,), wr[:, 0])
    w_blocks, b_blocks = split(w_part, w), split(b_part, b)
    k = max(part.size, p_co * part.size)
    x_blocks = split(part, x, k)
    # output partition layout matches the layer's default y ranks
    y_part = spawn(k, lambda c: DistConv(c, part, n_co, ks, p_co=p_co, padding=padding,
                                         w=_pick(w_blocks, c.rank), b=_pick(b_blocks, c.rank)
                                         ).y_part)[0]
    dy_blocks = split(y_part, dy, k)

    def prog(c):
        lay = DistConv(c, part, n_co, ks, p_co=p_co, padding=padding,
                       w=_pick(w_blocks, c.rank), b=_pick(b_blocks, c.rank))
        y, lctx = lay.forward(_pick(x_blocks, c.rank))
        dx = lay.backward(lctx, _pick(dy_blocks, c.rank))
        return {"y": y, "dx": dx, "dw": lay.grads["w"], "db": lay.grads["b"]}

    out = spawn(k, prog)
    return {"y": rel_error(_collect(out, "y", y_part), y_seq),
            "dx": rel_error(_collect(out, "dx", part), dx_seq),
            "dw": rel_error(_collect(out, "dw", w_part), dw_seq),
            "db": rel_error(_collect(out, "db", b_part), db_seq)}


def _pick(blocks, rank):
    return blocks[rank] if rank < len(blocks) else None


def affine_case(n_b, n_fi, n_fo, p_fo, p_fi, seed):
    rng = np.random.default_rng(seed)
    ranks = np.arange(p_fo * p_fi).reshape(p_fo, p_fi)
    w = rng.uniform(-1, 1, (n_fo, n_fi))
    b = rng.uniform(-1, 1, n_fo)
    x = rng.uniform(-1, 1, (n_b, n_fi))
    y_seq, ctx = affine_local(w, b, x)
    dy = rng.uniform(-1, 1, y_seq.shape)
    dw_seq, db_seq, dx_seq = affine_local_adjoint(dy, ctx)
    k = p_fo * p_fi
    w_part = Partition((n_fo, n_fi), (p_fo, p_fi), ranks)
    b_part = Partition((n_fo,), (p_fo,), ranks[:, 0])
    x_part = Partition((n_b, n_fi), (1, p_fi), ranks[0, :])
    y_part = Partition((n_b, n_fo), (1, p_fo), ranks[:, 0])
    w_blocks, b_blocks = split(w_part, w), split(b_part, b, k)
    x_blocks, dy_blocks = split(x_part, x, k), split(y_part, dy, k)

    def prog(c):
        lay = DistAffine(c, n_fi, n_fo, ranks, w=w_blocks[c.rank], b=b_blocks[c.rank])
        y, actx = lay.forward(x_blocks[c.rank])
        dx = lay.backward(actx, dy_blocks[c.rank])
        return {"y": y, "dx": dx, "dw": lay.grads["w"], "db": lay.grads["b"]}

    out = spawn(k, prog)
    res = {"y": rel_error(_collect(out, "y", y_part), y_seq),
           "dx": rel_error(_collect(out, "dx", x_part), dx_seq),
           "dw": rel_error(_collect(out, "dw", w_part), dw_seq),
           "db": rel_error(_collect(out, "db", b_part), db_seq)}
    res["bias_holders"] = [r for r, o in enumerate(out) if o["db"] is not None]
    return res


def transpose_case(shape, g1, g2, seed):
    rng = np.random.default_rng(seed)
    src = decompose(shape, g1)
    dst = decompose(shape, g2, ranks=np.arange(int(np.prod(g2)))[::-1])
    k = max(src.members + dst.members) + 1
    x, dy = rng.uniform(-1, 1, shape), rng.uniform(-1, 1, shape)
    xb, dyb = split(src, x, k), split(dst, dy, k)

    def prog(c):
        lay = DistTranspose(c, src, dst)
        y, _ = lay.forward(xb[c.rank])
        return {"y": y, "dx": lay.backward(None, dyb[c.rank])}

    out = spawn(k, prog)
    return {"y": rel_error(_collect(out, "y", dst), x), "dx": rel_error(_collect(out, "dx", src), dy)}


# -- randomized case generators ----------------------------------------------------


def random_pool_cases(count, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        D = int(rng.integers(1, 3))
        size = int(rng.integers(2, 4))
        stride = int(rng.integers(1, size + 1))
        feat = tuple(int(v) for v in rng.integers(size + 3, 14, D))
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4))) + feat
        grid = (1, int(rng.integers(1, shape[1] + 1))) + tuple(int(rng.integers(1, 4)) for _ in feat)
        kernel = KernelSpec.spatial(2, (size,) * D, stride)
        mode = ["max", "avg"][int(rng.integers(0, 2))]
        if np.prod(grid) > 8 or not geometry_ok(shape, kernel, decompose(shape, grid)):
            continue
        out.append((shape, grid, size, stride, mode, int(rng.integers(1 << 30))))
    return out


def random_conv_cases(count, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        D = int(rng.integers(1, 3))
        ksize = int(rng.integers(1, 4))
        pad = int(rng.integers(0, ksize))
        feat = tuple(int(v) for v in rng.integers(ksize + 3, 11, D))
        n_ci = int(rng.integers(1, 4))
        shape = (int(rng.integers(1, 3)), n_ci) + feat
        grid = (1, int(rng.integers(1, n_ci + 1))) + tuple(int(rng.integers(1, 3)) for _ in feat)
        n_co = int(rng.integers(1, 4))
        p_co = int(rng.integers(1, n_co + 1))
        kernel = KernelSpec.spatial(2, (ksize,) * D, 1, 1, pad)
        if p_co * np.prod(grid) > 8 or not geometry_ok(shape, kernel, decompose(shape, grid)):
            continue
        out.append((shape, grid, n_co, ksize, p_co, pad, int(rng.integers(1 << 30))))
    return out


def random_affine_cases(count, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        p_fo, p_fi = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        n_fo, n_fi = int(rng.integers(p_fo, 12)), int(rng.integers(p_fi, 12))
        out.append((int(rng.integers(1, 5)), n_fi, n_fo, p_fo, p_fi, int(rng.integers(1 << 30))))
    return out


def random_transpose_cases(count, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        shape = tuple(int(v) for v in rng.integers(1, 8, int(rng.integers(1, 4))))
        g1 = tuple(int(rng.integers(1, min(n, 3) + 1)) for n in shape)
        g2 = tuple(int(rng.integers(1, min(n, 3) + 1)) for n in shape)
        out.append((shape, g1, g2, int(rng.integers(1 << 30))))
    return out
