"""Layer objects, the reverse-mode tape, and the Adam optimizer.

A layer maps ``forward(x) -> (y, ctx)`` where ``ctx`` holds exactly what its
backward pass needs, and ``backward(ctx, dy) -> dx`` accumulates parameter
cotangents into ``layer.grads``.  The same interface serves the sequential
layers here and the distributed ones in :mod:`linmove.layers.distributed`,
where ``None`` stands for data a worker does not hold.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from ..tensor import ContractError
from . import local


class Layer:
    name: str = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray | None] = {}
        self.grads: dict[str, np.ndarray | None] = {}

    def forward(self, x):
        raise NotImplementedError

    def backward(self, ctx, dy):
        raise NotImplementedError

    def zero_grad(self):
        for k, p in self.params.items():
            self.grads[k] = None if p is None else np.zeros_like(p)

    def _accumulate(self, key: str, g):
        if g is None:
            return
        if self.grads.get(key) is None:
            self.grads[key] = np.array(g, copy=True)
        else:
            self.grads[key] += g


@dataclass
class TapeNode:
    layer: Layer
    ctx: Any


class Tape:
    """Records layer applications and replays their adjoints in reverse."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def apply(self, layer: Layer, x):
        y, ctx = layer.forward(x)
        self.nodes.append(TapeNode(layer, ctx))
        return y

    def backward(self, dy):
        if not self.nodes:
            raise ContractError("backward called before any forward was recorded")
        for node in reversed(self.nodes):
            dy = node.layer.backward(node.ctx, dy)
        self.nodes.clear()
        return dy


def tape_forward(tape: Tape, layers, x):
    for layer in layers:
        x = tape.apply(layer, x)
    return x


def tape_backward(tape: Tape, dy):
    return tape.backward(dy)


# -- sequential layers --------------------------------------------------------


class Conv(Layer):
    def __init__(self, w, b, window: local.Window, name="conv"):
        super().__init__()
        self.name = name
        self.params = {"w": w, "b": b}
        self.window = window
        self.zero_grad()

    def forward(self, x):
        return local.conv_local(self.params["w"], self.params["b"], x, self.window)

    def backward(self, ctx, dy):
        dw, db, dx = local.conv_local_adjoint(dy, ctx)
        self._accumulate("w", dw)
        self._accumulate("b", db)
        return dx


class Pool(Layer):
    def __init__(self, window: local.Window, mode="max", name="pool"):
        super().__init__()
        self.name = name
        self.window = window
        self.mode = mode

    def forward(self, x):
        return local.pool_local(x, self.window, self.mode)

    def backward(self, ctx, dy):
        return local.pool_local_adjoint(dy, ctx)


class Affine(Layer):
    def __init__(self, w, b, name="affine"):
        super().__init__()
        self.name = name
        self.params = {"w": w, "b": b}
        self.zero_grad()

    def forward(self, x):
        return local.affine_local(self.params["w"], self.params["b"], x)

    def backward(self, ctx, dy):
        dw, db, dx = local.affine_local_adjoint(dy, ctx)
        self._accumulate("w", dw)
        self._accumulate("b", db)
        return dx


class ReLU(Layer):
    name = "relu"

    def forward(self, x):
        if x is None:
            return None, None
        return local.relu(x)

    def backward(self, mask, dy):
        if dy is None:
            return None
        return local.relu_adjoint(dy, mask)


class Flatten(Layer):
    name = "flatten"

    def forward(self, x):
        if x is None:
            return None, None
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, shape, dy):
        if dy is None:
            return None
        return dy.reshape(shape)


# -- optimizer ----------------------------------------------------------------


class Adam:
    """Element-wise Adam with bias correction; updates arrays in place.

    Being element-wise, applying it to parameter blocks gives the same result
    as applying it to the assembled tensors.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for key, p in params.items():
            g = grads.get(key)
            if p is None or g is None:
                continue
            if key not in self.m:
                self.m[key] = np.zeros_like(p)
                self.v[key] = np.zeros_like(p)
            m, v = self.m[key], self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params: dict, grads: dict, state: Adam) -> None:
    state.step(params, grads)
