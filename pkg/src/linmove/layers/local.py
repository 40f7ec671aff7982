"""Sequential layer kernels and their backward (adjoint) maps.

Tensors are ``(batch, channels, *features)``.  Convolution is cross-correlation
(no kernel flip).  Every kernel accepts explicit per-side padding so a worker
can pad only where its block touches the global boundary.

==================  ============================================================
forward             backward
==================  ============================================================
``conv_local``      ``conv_local_adjoint`` -> ``(dw, db, dx)``
``pool_local``      ``pool_local_adjoint`` -> ``dx``
``affine_local``    ``affine_local_adjoint`` -> ``(dw, db, dx)``
==================  ============================================================
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..tensor import ContractError


@dataclass(frozen=True)
class Window:
    """Feature-space kernel geometry for the local kernels."""

    size: tuple[int, ...]
    stride: tuple[int, ...]
    dilation: tuple[int, ...]
    pad_left: tuple[int, ...]
    pad_right: tuple[int, ...]

    @classmethod
    def make(cls, size, stride=None, dilation=1, padding=0, pad_right=None) -> "Window":
        size = tuple(int(k) for k in np.atleast_1d(size))
        d = len(size)

        def full(v):
            return tuple(int(e) for e in np.broadcast_to(np.atleast_1d(v), (d,)))

        stride = size if stride is None else full(stride)
        pl = full(padding)
        pr = pl if pad_right is None else full(pad_right)
        return cls(size, stride, full(dilation), pl, pr)

    @classmethod
    def from_kernel(cls, kernel, leading: int = 2) -> "Window":
        """Feature dims of a full-rank :class:`~linmove.halo.KernelSpec`."""
        s = slice(leading, None)
        return cls(kernel.size[s], kernel.stride[s], kernel.dilation[s],
                   kernel.pad_left[s], kernel.pad_right[s])

    @property
    def ndim(self) -> int:
        return len(self.size)

    def out_shape(self, feat: Sequence[int]) -> tuple[int, ...]:
        out = []
        for n, k, s, d, pl, pr in zip(feat, self.size, self.stride, self.dilation,
                                      self.pad_left, self.pad_right):
            span = n + pl + pr - d * (k - 1) - 1
            if span < 0:
                raise ContractError(f"window of size {k} exceeds input extent {n}")
            out.append(span // s + 1)
        return tuple(out)


def _pad(x: np.ndarray, win: Window, value: float = 0.0) -> np.ndarray:
    if not any(win.pad_left) and not any(win.pad_right):
        return x
    lead = [(0, 0)] * (x.ndim - win.ndim)
    return np.pad(x, lead + list(zip(win.pad_left, win.pad_right)), constant_values=value)


def _windows(xp: np.ndarray, win: Window, out: tuple[int, ...]) -> np.ndarray:
    """View of shape ``(..., *out, *size)`` over the padded input."""
    D = win.ndim
    span = tuple(d * (k - 1) + 1 for k, d in zip(win.size, win.dilation))
    v = sliding_window_view(xp, span, axis=tuple(range(xp.ndim - D, xp.ndim)))
    idx = ((Ellipsis,)
           + tuple(slice(0, (o - 1) * s + 1, s) for o, s in zip(out, win.stride))
           + tuple(slice(None, None, d) for d in win.dilation))
    return v[idx]


def _offset_slices(kappa, win: Window, out):
    return tuple(slice(k * d, k * d + (o - 1) * s + 1, s)
                 for k, d, o, s in zip(kappa, win.dilation, out, win.stride))


def _crop(xp: np.ndarray, win: Window) -> np.ndarray:
    sl = [slice(None)] * (xp.ndim - win.ndim)
    sl += [slice(pl, n - pr) for n, pl, pr in
           zip(xp.shape[-win.ndim:], win.pad_left, win.pad_right)]
    return xp[tuple(sl)]


# -- convolution --------------------------------------------------------------


def conv_local(w: np.ndarray, b: np.ndarray | None, x: np.ndarray, win: Window):
    """Cross-correlate ``x`` (N, Ci, *S) with ``w`` (Co, Ci, *K); returns ``(y, ctx)``."""
    D = win.ndim
    if x.ndim != D + 2 or w.ndim != D + 2 or w.shape[1] != x.shape[1] \
            or tuple(w.shape[2:]) != win.size:
        raise ContractError(f"conv shapes disagree: x {x.shape}, w {w.shape}, window {win.size}")
    if b is not None and b.shape != (w.shape[0],):
        raise ContractError(f"bias shape {b.shape} does not match {w.shape[0]} output channels")
    out = win.out_shape(x.shape[2:])
    xp = _pad(x, win)
    cols = _windows(xp, win, out)
    y = np.tensordot(cols, w, axes=([1] + list(range(2 + D, 2 + 2 * D)),
                                    list(range(1, 2 + D))))
    y = np.moveaxis(y, -1, 1)
    if b is not None:
        y = y + b.reshape((1, -1) + (1,) * D)
    return np.ascontiguousarray(y), (x, w, b is not None, win)


def conv_local_adjoint(dy: np.ndarray, ctx):
    x, w, has_bias, win = ctx
    D = win.ndim
    out = tuple(dy.shape[2:])
    xp = _pad(x, win)
    cols = _windows(xp, win, out)
    feat_axes = list(range(2, 2 + D))
    dw = np.tensordot(dy, cols, axes=([0] + feat_axes, [0] + feat_axes))
    db = dy.sum(axis=tuple([0] + feat_axes)) if has_bias else None
    # g[n, *o, ci, *k] = sum_co dy[n, co, *o] w[co, ci, *k]
    g = np.tensordot(dy, w, axes=([1], [0]))
    dxp = np.zeros(xp.shape, dtype=np.result_type(dy, w))
    for kappa in product(*(range(k) for k in win.size)):
        part = g[(slice(None),) + (slice(None),) * D + (slice(None),) + kappa]
        dxp[(slice(None), slice(None)) + _offset_slices(kappa, win, out)] += np.moveaxis(part, -1, 1)
    return dw, db, _crop(dxp, win).copy()


# -- pooling ------------------------------------------------------------------


def pool_local(x: np.ndarray, win: Window, mode: str = "max"):
    """Max or average pooling over the trailing feature dims; returns ``(y, ctx)``.

    Max pooling pads with ``-inf`` and breaks ties towards the lowest flat
    window index; average pooling pads with zeros and divides by the window size.
    """
    if mode not in ("max", "avg"):
        raise ContractError(f"unknown pooling mode {mode!r}")
    D = win.ndim
    out = win.out_shape(x.shape[-D:])
    xp = _pad(x, win, -np.inf if mode == "max" else 0.0)
    cols = _windows(xp, win, out)
    flat = cols.reshape(cols.shape[:-D] + (-1,))
    if mode == "avg":
        return flat.mean(axis=-1), (x.shape, win, mode, None)
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return y, (x.shape, win, mode, arg)


def pool_local_adjoint(dy: np.ndarray, ctx) -> np.ndarray:
    x_shape, win, mode, arg = ctx
    D = win.ndim
    out = tuple(dy.shape[-D:])
    padded = tuple(x_shape[:-D]) + tuple(
        n + pl + pr for n, pl, pr in zip(x_shape[-D:], win.pad_left, win.pad_right))
    dxp = np.zeros(padded, dtype=dy.dtype)
    if mode == "avg":
        scale = 1.0 / float(np.prod(win.size))
        for kappa in product(*(range(k) for k in win.size)):
            dxp[(Ellipsis,) + _offset_slices(kappa, win, out)] += dy * scale
        return _crop(dxp, win).copy()
    kappa = np.unravel_index(arg, win.size)
    grids = np.meshgrid(*(np.arange(o) for o in out), indexing="ij")
    idx = tuple(g * s + k * d for g, s, k, d in zip(grids, win.stride, kappa, win.dilation))
    flat_idx = np.ravel_multi_index(idx, padded[-D:])
    lead = int(np.prod(padded[:-D]))
    rows = np.arange(lead).reshape(padded[:-D] + (1,) * D)
    view = dxp.reshape(lead, -1)
    np.add.at(view, (np.broadcast_to(rows, flat_idx.shape).ravel(), flat_idx.ravel()), dy.ravel())
    return _crop(dxp, win).copy()


# -- affine -------------------------------------------------------------------


def affine_local(w: np.ndarray, b: np.ndarray | None, x: np.ndarray):
    """``y = x w^T + b`` for a batch ``x`` of shape (N, n_fi)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ContractError(f"affine shapes disagree: x {x.shape}, w {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ContractError(f"bias shape {b.shape} does not match {w.shape[0]} outputs")
    y = x @ w.T
    if b is not None:
        y = y + b
    return y, (x, w, b is not None)


def affine_local_adjoint(dy: np.ndarray, ctx):
    x, w, has_bias = ctx
    dw = dy.T @ x
    db = dy.sum(axis=0) if has_bias else None
    return dw, db, dy @ w


# -- point-wise ---------------------------------------------------------------


def relu(x: np.ndarray):
    mask = x > 0
    return np.where(mask, x, 0.0).astype(x.dtype, copy=False), mask


def relu_adjoint(dy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(mask, dy, 0.0).astype(dy.dtype, copy=False)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy; returns ``(loss, ctx)``."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ContractError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ContractError(f"label out of range [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - lse[:, None]
    loss = -logp[np.arange(n), labels].mean()
    return float(loss), (logp, labels)


def cross_entropy_adjoint(dloss: float, ctx) -> np.ndarray:
    logp, labels = ctx
    n = logp.shape[0]
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    return g * (dloss / n)
