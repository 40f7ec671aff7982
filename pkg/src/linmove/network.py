"""Lenet-5 in a sequential and a four-worker distributed form.

Both forms are built from the same initial parameters so they can be compared
layer by layer and step by step.

Distributed layout (four workers)::

    input      rank 0, transposed onto a 1x1x2x2 feature grid
    C1 .. S4   1x1x2x2 feature grid, conv weights and biases resident on rank 0
    flatten    channels split over ranks 0 and 1 (8 + 8 channels = 200 + 200 features)
    C5/F6/Out  weights blocked 2x2 over ranks [[0, 1], [2, 3]], biases on ranks 0 and 2
    logits     transposed back to rank 0, where the loss is evaluated
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .comm import spawn
from .data import Dataset, pad_images
from .layers import local
from .layers.core import Adam, Affine, Conv, Flatten, Pool, ReLU
from .layers.distributed import DistAffine, DistConv, DistPool, DistTranspose
from .partition import Partition, assemble, decompose, split
from .tensor import ContractError, rel_error

LAYER_SHAPES = {
    "C1": ((6, 1, 5, 5), (6,)),
    "C3": ((16, 6, 5, 5), (16,)),
    "C5": ((120, 400), (120,)),
    "F6": ((84, 120), (84,)),
    "Output": ((10, 84), (10,)),
}
ACTIVATIONS = ("C1", "S2", "C3", "S4", "C5", "F6", "Output")
AFFINE_RANKS = np.array([[0, 1], [2, 3]])
DIST_WORKERS = 4
INPUT_SIZE = 32


def init_lenet5_params(seed: int = 0, dtype=np.float64) -> dict:
    """Uniform ``+-1/sqrt(fan_in)`` weights and biases, drawn layer by layer."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, (ws, bs) in LAYER_SHAPES.items():
        bound = 1.0 / math.sqrt(int(np.prod(ws[1:])))
        params[name] = {"w": rng.uniform(-bound, bound, ws).astype(dtype),
                        "b": rng.uniform(-bound, bound, bs).astype(dtype)}
    return params


def count_params(params: dict) -> int:
    return sum(int(a.size) for p in params.values() for a in p.values() if a is not None)


def placement_partitions(name: str) -> tuple[Partition, Partition]:
    """Weight and bias partitions of a parameterized layer in the distributed net."""
    ws, bs = LAYER_SHAPES[name]
    if name in ("C1", "C3"):
        return Partition(ws, (1,) * len(ws), [0]), Partition(bs, (1,), [0])
    return Partition(ws, (2, 2), AFFINE_RANKS), Partition(bs, (2,), AFFINE_RANKS[:, 0])


def scatter_params(params: dict, workers: int = DIST_WORKERS) -> list[dict]:
    """Split full parameters into per-worker blocks (``None`` where a worker holds nothing)."""
    out = [dict() for _ in range(workers)]
    for name in LAYER_SHAPES:
        wp, bp = placement_partitions(name)
        ws = split(wp, params[name]["w"], workers)
        bs = split(bp, params[name]["b"], workers)
        for r in range(workers):
            out[r][name] = {"w": ws[r], "b": bs[r]}
    return out


def gather_params(blocks: list[dict]) -> dict:
    """Reassemble per-worker blocks into full parameters."""
    params = {}
    for name in LAYER_SHAPES:
        wp, bp = placement_partitions(name)
        params[name] = {"w": assemble(wp, [b[name]["w"] for b in blocks]),
                        "b": assemble(bp, [b[name]["b"] for b in blocks])}
    return params


# -- network description --------------------------------------------------------


@dataclass
class LayerDesc:
    name: str
    kind: str
    config: dict = field(default_factory=dict)
    partition: str = ""


@dataclass
class NetworkSpec:
    mode: str
    workers: int
    batch: int
    layers: list[LayerDesc]
    placement: dict  # layer -> per-worker {"w": shape | None, "b": shape | None}

    def placement_rows(self) -> list[str]:
        rows = []
        for name, per in self.placement.items():
            cells = [f"w{p['w']} b{p['b']}" if p["b"] else (f"w{p['w']}" if p["w"] else "None")
                     for p in per]
            rows.append(f"{name}, " + ", ".join(cells))
        return rows


def build_lenet5(mode: str = "sequential", workers: int | None = None,
                 batch: int = 256) -> NetworkSpec:
    if mode not in ("sequential", "distributed"):
        raise ContractError(f"unknown mode {mode!r}")
    workers = (1 if mode == "sequential" else DIST_WORKERS) if workers is None else workers
    if mode == "distributed" and workers != DIST_WORKERS:
        raise ContractError(f"the distributed Lenet-5 runs on exactly {DIST_WORKERS} workers, "
                            f"not {workers}")
    if mode == "sequential" and workers != 1:
        raise ContractError("the sequential Lenet-5 runs on one worker")
    dist = mode == "distributed"
    feat = "1x1x2x2 on [0,1,2,3]" if dist else "1x1x1x1"
    aff = "2x2 on [[0,1],[2,3]]" if dist else "1x1"
    layers = [
        LayerDesc("input", "transpose", {"to": feat}, "1x1x1x1 on [0]"),
        LayerDesc("C1", "conv", {"in": 1, "out": 6, "k": 5}, feat),
        LayerDesc("relu1", "relu"),
        LayerDesc("S2", "maxpool", {"k": 2, "s": 2}, feat),
        LayerDesc("C3", "conv", {"in": 6, "out": 16, "k": 5}, feat),
        LayerDesc("relu3", "relu"),
        LayerDesc("S4", "maxpool", {"k": 2, "s": 2}, feat),
        LayerDesc("T4", "transpose", {"to": "1x2x1x1 on [0,1]" if dist else "1x1x1x1"}),
        LayerDesc("flatten", "flatten", {"features": 400}),
        LayerDesc("C5", "affine", {"in": 400, "out": 120}, aff),
        LayerDesc("relu5", "relu"),
        LayerDesc("T5", "transpose"),
        LayerDesc("F6", "affine", {"in": 120, "out": 84}, aff),
        LayerDesc("relu6", "relu"),
        LayerDesc("T6", "transpose"),
        LayerDesc("Output", "affine", {"in": 84, "out": 10}, aff),
        LayerDesc("collect", "transpose", {"to": "1x1 on [0]"}),
        LayerDesc("loss", "cross_entropy"),
    ]
    if not dist:
        layers = [d for d in layers if d.kind != "transpose"]
    placement = {}
    for name, (ws, bs) in LAYER_SHAPES.items():
        if dist:
            wp, bp = placement_partitions(name)
            placement[name] = [{"w": wp.local_shape(r), "b": bp.local_shape(r)}
                               for r in range(workers)]
        else:
            placement[name] = [{"w": ws, "b": bs}]
    return NetworkSpec(mode, workers, batch, layers, placement)


# -- shared helpers -------------------------------------------------------------


def _digest(h, ctx) -> None:
    """Fold branch decisions (max-pool argmax, ReLU masks) into a hash."""
    if ctx is None:
        return
    if isinstance(ctx, np.ndarray) and ctx.dtype == bool:
        h.update(ctx.tobytes())
    elif isinstance(ctx, tuple) and len(ctx) == 4 and ctx[2] == "max":
        h.update(np.ascontiguousarray(ctx[3]).tobytes())


class _Net:
    """Forward/backward bookkeeping shared by both network forms."""

    layers: list

    def _run(self, x, record: bool):
        acts, nodes = {}, []
        for name, layer in self.layers:
            x, ctx = layer.forward(x)
            if record:
                nodes.append((layer, ctx))
            if name in ACTIVATIONS:
                acts[name] = x
        return x, acts, nodes

    def forward(self, x, labels=None, record: bool = True):
        """Returns ``(loss, logits, activations)``; loss is ``None`` without labels."""
        logits, acts, nodes = self._run(x, record)
        loss = None
        self._loss_ctx = None
        if labels is not None and logits is not None:
            loss, self._loss_ctx = local.cross_entropy(logits, labels)
        self._nodes = nodes
        return loss, logits, acts

    def branch_digest(self) -> str:
        h = hashlib.sha256()
        for _, ctx in self._nodes:
            _digest(h, ctx)
        return h.hexdigest()

    def backward(self):
        if not getattr(self, "_nodes", None):
            raise ContractError("backward called before a recorded forward pass")
        dy = None if self._loss_ctx is None else local.cross_entropy_adjoint(1.0, self._loss_ctx)
        for layer, ctx in reversed(self._nodes):
            dy = layer.backward(ctx, dy)
        self._nodes = []
        return dy

    def param_layers(self):
        return [(n, l) for n, l in self.layers if n in LAYER_SHAPES]

    def zero_grad(self):
        for _, layer in self.param_layers():
            layer.zero_grad()

    def flat_params(self) -> dict:
        return {f"{n}.{k}": v for n, l in self.param_layers() for k, v in l.params.items()}

    def flat_grads(self) -> dict:
        return {f"{n}.{k}": v for n, l in self.param_layers() for k, v in l.grads.items()}

    def param_blocks(self) -> dict:
        return {n: {k: (None if v is None else v.copy()) for k, v in l.params.items()}
                for n, l in self.param_layers()}

    def grad_blocks(self) -> dict:
        return {n: {k: (None if v is None else v.copy()) for k, v in l.grads.items()}
                for n, l in self.param_layers()}


class SequentialLenet5(_Net):
    def __init__(self, params: dict):
        p = {n: {k: v.copy() for k, v in d.items()} for n, d in params.items()}
        conv = local.Window.make((5, 5), 1)
        pool = local.Window.make((2, 2))
        self.layers = [
            ("C1", Conv(p["C1"]["w"], p["C1"]["b"], conv, "C1")),
            ("relu1", ReLU()),
            ("S2", Pool(pool, "max", "S2")),
            ("C3", Conv(p["C3"]["w"], p["C3"]["b"], conv, "C3")),
            ("relu3", ReLU()),
            ("S4", Pool(pool, "max", "S4")),
            ("flatten", Flatten()),
            ("C5", Affine(p["C5"]["w"], p["C5"]["b"], "C5")),
            ("relu5", ReLU()),
            ("F6", Affine(p["F6"]["w"], p["F6"]["b"], "F6")),
            ("relu6", ReLU()),
            ("Output", Affine(p["Output"]["w"], p["Output"]["b"], "Output")),
        ]


class DistributedLenet5(_Net):
    """One worker's view of the distributed network; build inside an SPMD program."""

    def __init__(self, comm, blocks: dict, batch: int):
        if comm.size != DIST_WORKERS:
            raise ContractError(f"distributed Lenet-5 needs {DIST_WORKERS} workers")
        n = batch
        self.in_part = Partition((n, 1, INPUT_SIZE, INPUT_SIZE), (1, 1, 1, 1), [0])
        feat = decompose(self.in_part.global_shape, (1, 1, 2, 2))
        c1 = DistConv(comm, feat, 6, 5, w=blocks["C1"]["w"], b=blocks["C1"]["b"], name="C1")
        s2 = DistPool(comm, c1.y_part, 2, name="S2")
        c3 = DistConv(comm, s2.y_part, 16, 5, w=blocks["C3"]["w"], b=blocks["C3"]["b"], name="C3")
        s4 = DistPool(comm, c3.y_part, 2, name="S4")
        chan = Partition(s4.y_part.global_shape, (1, 2, 1, 1), [0, 1])

        def affine(name, n_fi, n_fo):
            return DistAffine(comm, n_fi, n_fo, AFFINE_RANKS, w=blocks[name]["w"],
                              b=blocks[name]["b"], name=name)

        c5, f6, out = affine("C5", 400, 120), affine("F6", 120, 84), affine("Output", 84, 10)
        self.out_part = Partition((n, 10), (1, 1), [0])
        self.partitions = {"C1": c1.y_part, "S2": s2.y_part, "C3": c3.y_part, "S4": s4.y_part,
                           "C5": c5.y_partition(n), "F6": f6.y_partition(n),
                           "Output": out.y_partition(n)}
        self.layers = [
            ("input", DistTranspose(comm, self.in_part, feat, "input")),
            ("C1", c1),
            ("relu1", ReLU()),
            ("S2", s2),
            ("C3", c3),
            ("relu3", ReLU()),
            ("S4", s4),
            ("T4", DistTranspose(comm, s4.y_part, chan, "T4")),
            ("flatten", Flatten()),
            ("C5", c5),
            ("relu5", ReLU()),
            ("T5", DistTranspose(comm, c5.y_partition(n), f6.x_partition(n), "T5")),
            ("F6", f6),
            ("relu6", ReLU()),
            ("T6", DistTranspose(comm, f6.y_partition(n), out.x_partition(n), "T6")),
            ("Output", out),
            ("collect", DistTranspose(comm, out.y_partition(n), self.out_part, "collect")),
        ]


# -- single evaluations ------------------------------------------------------------


@dataclass
class Evaluation:
    loss: float | None
    logits: np.ndarray | None
    activations: dict
    grads: dict | None
    digest: str


def run_sequential(params: dict, x: np.ndarray, labels, backward: bool = True) -> Evaluation:
    net = SequentialLenet5(params)
    loss, logits, acts = net.forward(x, labels)
    digest = net.branch_digest()
    grads = None
    if backward:
        net.backward()
        grads = net.grad_blocks()
    return Evaluation(loss, logits, acts, grads, digest)


def run_distributed(params: dict | None, x: np.ndarray, labels, backward: bool = True,
                    blocks: list[dict] | None = None, timeout: float | None = None) -> Evaluation:
    """Scatter ``params`` (or use per-worker ``blocks``), run one pass, gather everything."""
    blocks = scatter_params(params) if blocks is None else blocks
    n = x.shape[0]

    def program(comm):
        net = DistributedLenet5(comm, blocks[comm.rank], n)
        root = comm.rank == 0
        loss, logits, acts = net.forward(x if root else None, labels if root else None)
        digest = net.branch_digest()
        grads = None
        if backward:
            net.backward()
            grads = net.grad_blocks()
        return loss, logits, acts, grads, digest, net.partitions

    res = spawn(DIST_WORKERS, program, timeout=timeout)
    parts = res[0][5]
    acts = {name: assemble(parts[name], [r[2][name] for r in res]) for name in parts}
    grads = gather_params([r[3] for r in res]) if backward else None
    digest = hashlib.sha256("".join(r[4] for r in res).encode()).hexdigest()
    return Evaluation(res[0][0], res[0][1], acts, grads, digest)


# -- equivalence check -------------------------------------------------------------


@dataclass
class EquivalenceReport:
    rows: list[tuple[str, str, float, float, bool]]

    @property
    def passed(self) -> bool:
        return all(r[4] for r in self.rows)

    @property
    def first_failure(self) -> str | None:
        return next((r[0] for r in self.rows if not r[4]), None)

    def lines(self) -> list[str]:
        out = [f"{n}, {q}, {e:.3e}, {t:g}, {'PASS' if ok else 'FAIL'}" for n, q, e, t, ok in self.rows]
        out.append("verify, " + ("PASS" if self.passed
                                 else f"FAIL (first mismatch: {self.first_failure})"))
        return out


def random_batch(n: int, seed: int, dtype=np.float64):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, (n, 1, INPUT_SIZE, INPUT_SIZE)).astype(dtype)
    return x, rng.integers(0, 10, size=n)


def verify_equivalence(seed: int = 0, batch: int = 4, perturb: str | None = None,
                       fwd_tol: float = 1e-12, grad_tol: float = 1e-10,
                       x: np.ndarray | None = None, labels=None) -> EquivalenceReport:
    """Compare every activation, the loss and every gradient of the two network forms.

    ``perturb`` names a layer whose distributed weight block on one worker is
    nudged before the run (fault injection).
    """
    params = init_lenet5_params(seed)
    if x is None:
        x, labels = random_batch(batch, seed + 1)
    blocks = scatter_params(params)
    if perturb is not None:
        if perturb not in LAYER_SHAPES:
            raise ContractError(f"unknown layer {perturb!r}")
        holder = 0 if perturb in ("C1", "C3") else 1
        blocks[holder][perturb]["w"] += 1e-3
    seq = run_sequential(params, x, labels)
    dist = run_distributed(None, x, labels, blocks=blocks)
    rows = []
    for name in ACTIVATIONS:
        e = rel_error(dist.activations[name], seq.activations[name])
        rows.append((name, "forward", e, fwd_tol, e < fwd_tol))
    e = abs(dist.loss - seq.loss) / max(abs(seq.loss), 1e-300)
    rows.append(("loss", "forward", e, fwd_tol, e < fwd_tol))
    for name in reversed(list(LAYER_SHAPES)):
        for k in ("w", "b"):
            e = rel_error(dist.grads[name][k], seq.grads[name][k])
            rows.append((name, f"grad_{k}", e, grad_tol, e < grad_tol))
    return EquivalenceReport(rows)


# -- training ------------------------------------------------------------------------


@dataclass
class MetricRow:
    epoch: int
    step: int
    loss: float
    test_acc: float = float("nan")

    def line(self) -> str:
        acc = "nan" if math.isnan(self.test_acc) else f"{self.test_acc:.4f}"
        return f"{self.epoch}, {self.step}, {self.loss:.17g}, {acc}"


METRICS_HEADER = "epoch, step, loss, test_acc"


def prepare(ds: Dataset, dtype=np.float64) -> Dataset:
    """Pad images to the network's input size and cast."""
    imgs = ds.images
    if imgs.shape[-1] != INPUT_SIZE:
        imgs = pad_images(imgs, INPUT_SIZE)
    return Dataset(np.ascontiguousarray(imgs, dtype=dtype), ds.labels)


def batches_per_epoch(n: int, batch: int) -> int:
    """Fixed-size batches only; the remainder is dropped."""
    return n // batch


def _loop(root: bool, step: Callable, predict: Callable, train: Dataset, test: Dataset | None,
          epochs: int, batch: int, seed: int, max_steps: int | None,
          emit: Callable[[MetricRow], None] | None) -> list[MetricRow]:
    rng = np.random.default_rng(seed)
    n_steps = batches_per_epoch(len(train), batch)
    if n_steps == 0:
        raise ContractError(f"dataset of {len(train)} samples has no full batch of {batch}")
    history, done = [], 0
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(len(train))
        for i in range(n_steps):
            idx = perm[i * batch:(i + 1) * batch]
            loss = step(train.images[idx] if root else None, train.labels[idx] if root else None)
            done += 1
            last = i == n_steps - 1 or done == max_steps
            acc = _accuracy(root, predict, test, batch) if last and test is not None else float("nan")
            if root:
                row = MetricRow(epoch, done, float(loss), acc)
                history.append(row)
                if emit:
                    emit(row)
            if done == max_steps:
                return history
    return history


def _accuracy(root, predict, test: Dataset, batch: int) -> float:
    correct = total = 0
    for j in range(batches_per_epoch(len(test), batch)):
        sl = slice(j * batch, (j + 1) * batch)
        logits = predict(test.images[sl] if root else None)
        if root:
            correct += int((logits.argmax(axis=1) == test.labels[sl]).sum())
            total += batch
    return correct / total if root and total else float("nan")


@dataclass
class TrainResult:
    history: list[MetricRow]
    params: dict

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.history])


def train(mode: str, train_set: Dataset, test_set: Dataset | None = None, epochs: int = 1,
          batch: int = 256, lr: float = 1e-3, seed: int = 0, max_steps: int | None = None,
          emit: Callable[[MetricRow], None] | None = None, dtype=np.float64,
          timeout: float | None = None) -> TrainResult:
    """Adam training from ``init_lenet5_params(seed)``; returns metrics and final parameters."""
    params = init_lenet5_params(seed, dtype)
    train_set = prepare(train_set, dtype)
    test_set = None if test_set is None else prepare(test_set, dtype)

    if mode == "sequential":
        net = SequentialLenet5(params)
        opt = Adam(lr)

        def step(xb, yb):
            net.zero_grad()
            loss, _, _ = net.forward(xb, yb)
            net.backward()
            opt.step(net.flat_params(), net.flat_grads())
            return loss

        def predict(xb):
            return net.forward(xb, record=False)[1]

        hist = _loop(True, step, predict, train_set, test_set, epochs, batch, seed, max_steps, emit)
        return TrainResult(hist, net.param_blocks())

    if mode != "distributed":
        raise ContractError(f"unknown mode {mode!r}")
    blocks = scatter_params(params)

    def program(comm):
        net = DistributedLenet5(comm, blocks[comm.rank], batch)
        opt = Adam(lr)
        root = comm.rank == 0

        def step(xb, yb):
            net.zero_grad()
            loss, _, _ = net.forward(xb, yb)
            net.backward()
            opt.step(net.flat_params(), net.flat_grads())
            return loss

        def predict(xb):
            return net.forward(xb, record=False)[1]

        hist = _loop(root, step, predict, train_set, test_set, epochs, batch, seed, max_steps,
                     emit if root else None)
        return hist, net.param_blocks()

    res = spawn(DIST_WORKERS, program, timeout=timeout)
    return TrainResult(res[0][0], gather_params([r[1] for r in res]))
