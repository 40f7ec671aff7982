"""Simulated SPMD runtime and the parallel data-movement primitives.

``spawn(k, program)`` runs ``program(comm, ...)`` on ``k`` threads.  Workers
only interact through :class:`Comm`: blocking, tagged, FIFO point-to-point
messages whose payloads are copied on send.  That small surface (``rank``,
``size``, ``send``, ``recv``, ``barrier``) is the transport boundary; the
primitives below only use it.

Every primitive comes in a forward/adjoint pair and is called collectively by
the workers involved, in the same order on every worker.  Data a worker does
not hold is ``None``.  Reductions accumulate in ascending rank order, so
results are bitwise reproducible.
"""
from __future__ import annotations

import copy as _copy
import logging
import queue
import threading
import time
import traceback
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from .partition import Partition, overlap
from .tensor import ContractError, IndexRange, add_slice

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0
_POLL = 0.02


class CommError(RuntimeError):
    pass


class CommTimeout(CommError):
    """A receive waited longer than the watchdog allows."""


class TagMismatch(CommError):
    """The next message on a channel was not the one the receiver expected."""


class Aborted(CommError):
    """Another worker failed; this one was unblocked and stopped."""


class SPMDError(RuntimeError):
    def __init__(self, message: str, failures: dict[int, BaseException]):
        super().__init__(message)
        self.failures = failures


@dataclass
class Message:
    tag: str
    payload: Any
    source: int
    dest: int


class _World:
    def __init__(self, size: int, timeout: float):
        self.size = size
        self.timeout = timeout
        self.channels = {(s, d): queue.Queue() for s in range(size) for d in range(size)}
        self.abort = threading.Event()
        self.barrier = threading.Barrier(size)
        self.sent = 0

    def pending(self) -> dict[tuple[int, int], list[str]]:
        out = {}
        for key, q in self.channels.items():
            tags = [m.tag for m in list(q.queue)]
            if tags:
                out[key] = tags
        return out


class Comm:
    """One worker's handle on the simulated transport."""

    def __init__(self, world: _World, rank: int):
        self._world = world
        self.rank = rank
        self.size = world.size

    def _check_peer(self, peer: int):
        if not 0 <= peer < self.size:
            raise ContractError(f"rank {peer} out of range for a group of {self.size}")
        if peer == self.rank:
            raise ContractError(f"worker {self.rank} cannot message itself")

    def send(self, payload, dest: int, tag: str):
        self._check_peer(dest)
        if isinstance(payload, np.ndarray):
            payload = payload.copy()
        else:
            payload = _copy.deepcopy(payload)
        self._world.channels[(self.rank, dest)].put(Message(tag, payload, self.rank, dest))
        self._world.sent += 1

    def recv(self, source: int, tag: str):
        self._check_peer(source)
        chan = self._world.channels[(source, self.rank)]
        deadline = time.monotonic() + self._world.timeout
        while True:
            if self._world.abort.is_set():
                raise Aborted(f"worker {self.rank} stopped: group aborted")
            try:
                msg = chan.get(timeout=_POLL)
                break
            except queue.Empty:
                if time.monotonic() > deadline:
                    raise CommTimeout(
                        f"worker {self.rank} waited {self._world.timeout:.1f}s for {tag!r} "
                        f"from worker {source}; probable collective mismatch") from None
        if msg.tag != tag:
            raise TagMismatch(
                f"worker {self.rank} expected {tag!r} from {source} but received {msg.tag!r}")
        return msg.payload

    def barrier(self):
        try:
            self._world.barrier.wait(timeout=self._world.timeout)
        except threading.BrokenBarrierError:
            if self._world.abort.is_set():
                raise Aborted(f"worker {self.rank} stopped: group aborted") from None
            raise CommTimeout(f"worker {self.rank} timed out in barrier") from None


def spawn(k: int, program: Callable, *args, timeout: float | None = None, **kwargs) -> list:
    """Run ``program(comm, *args, **kwargs)`` on ``k`` workers; return results by rank.

    If any worker raises, the others are unblocked and an :class:`SPMDError`
    names the failing rank and the messages still queued.
    """
    if k < 1:
        raise ContractError("a worker group needs at least one worker")
    world = _World(k, DEFAULT_TIMEOUT if timeout is None else timeout)
    results: list = [None] * k
    failures: dict[int, BaseException] = {}
    tracebacks: dict[int, str] = {}

    def run(rank):
        try:
            results[rank] = program(Comm(world, rank), *args, **kwargs)
        except BaseException as exc:  # noqa: BLE001 - reported through SPMDError
            failures[rank] = exc
            tracebacks[rank] = traceback.format_exc()
            world.abort.set()
            world.barrier.abort()

    if k == 1:
        run(0)
    else:
        threads = [threading.Thread(target=run, args=(r,), name=f"worker-{r}", daemon=True)
                   for r in range(k)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

    pending = world.pending()
    if failures:
        primary = {r: e for r, e in failures.items() if not isinstance(e, Aborted)} or failures
        rank = min(primary)
        exc = primary[rank]
        kind = ("watchdog timeout (probable collective mismatch)"
                if isinstance(exc, CommTimeout) else type(exc).__name__)
        msg = (f"worker {rank} failed: {kind}: {exc}; pending channels: {pending or 'none'}")
        log.debug("worker %d traceback:\n%s", rank, tracebacks[rank])
        raise SPMDError(msg, failures) from exc
    if pending:
        raise SPMDError(f"workers finished with undelivered messages: {pending}", {})
    return results


# -- point to point -----------------------------------------------------------


def send_recv(comm: Comm, x, src: int, dst: int, keep: bool = True, tag: str = "sendrecv"):
    """Copy ``x`` from ``src`` to ``dst``.

    With ``keep`` the source retains ``x`` (a copy); without it the data moves.
    """
    if src == dst:
        raise ContractError("send_recv needs two distinct workers")
    if comm.rank == src:
        comm.send(x, dst, tag)
        return np.array(x, copy=True) if keep else None
    if comm.rank == dst:
        return comm.recv(src, tag)
    return None


def send_recv_adjoint(comm: Comm, dy, src: int, dst: int, keep: bool = True,
                      tag: str = "sendrecv*"):
    """Receive-send back to ``src``, adding into the source's own cotangent."""
    if comm.rank == dst:
        comm.send(dy, src, tag)
        return None
    if comm.rank == src:
        got = comm.recv(dst, tag)
        return dy + got if keep else got
    return None


# -- scatter / gather ---------------------------------------------------------


def _check_tiling(ranges: dict[int, IndexRange], shape: Sequence[int]):
    shape = tuple(shape)
    total = 0
    items = list(ranges.values())
    for i, r in enumerate(items):
        if not r.within(shape):
            raise ContractError(f"block {r} outside {shape}")
        total += r.size
        for other in items[i + 1:]:
            if not r.intersect(other).empty:
                raise ContractError(f"blocks {r} and {other} overlap")
    if total != int(np.prod(shape)):
        raise ContractError(f"blocks do not tile shape {shape}")


def scatter(comm: Comm, x, root: int, ranges: dict[int, IndexRange], tag: str = "scatter"):
    """Send block ``ranges[r]`` of the root tensor to worker ``r``."""
    out = None
    if comm.rank == root:
        _check_tiling(ranges, x.shape)
        for r in sorted(ranges):
            block = x[ranges[r].slices()]
            if r == root:
                out = block.copy()
            else:
                comm.send(block, r, tag)
    elif comm.rank in ranges:
        out = comm.recv(root, tag)
    return out


def gather(comm: Comm, x, root: int, ranges: dict[int, IndexRange], shape: Sequence[int],
           tag: str = "gather", add: bool = False, dtype=None):
    """Assemble blocks on ``root``.  With ``add`` blocks are summed into a zero tensor."""
    if comm.rank != root:
        if comm.rank in ranges:
            comm.send(x, root, tag)
        return None
    _check_tiling(ranges, shape)
    blocks = {r: (x if r == root else comm.recv(r, tag)) for r in sorted(ranges)}
    if dtype is None:
        dtype = next(iter(blocks.values())).dtype if blocks else np.float64
    out = np.zeros(tuple(shape), dtype=dtype)
    for r, block in blocks.items():
        if add:
            add_slice(out, ranges[r], block)
        else:
            out[ranges[r].slices()] = block
    return out


def scatter_adjoint(comm: Comm, dy, root: int, ranges: dict[int, IndexRange],
                    shape: Sequence[int], tag: str = "scatter*"):
    return gather(comm, dy, root, ranges, shape, tag=tag, add=True)


def gather_adjoint(comm: Comm, dy, root: int, ranges: dict[int, IndexRange], tag: str = "gather*"):
    return scatter(comm, dy, root, ranges, tag=tag)


# -- broadcast / reduce ---------------------------------------------------------


def broadcast_along(comm: Comm, x, bmap: list[tuple[int, list[int]]], tag: str = "bcast"):
    """Each source in ``bmap`` copies its tensor to every worker of its group.

    A source need not belong to its own group.  Returns the copy this worker
    received, or ``None``.
    """
    out = None
    for src, group in bmap:
        if comm.rank == src:
            if x is None:
                raise ContractError(f"broadcast source {src} holds no data")
            for d in group:
                if d != src:
                    comm.send(x, d, tag)
    for src, group in bmap:
        if comm.rank in group:
            out = np.array(x, copy=True) if src == comm.rank else comm.recv(src, tag)
    return out


def reduce_along(comm: Comm, y, bmap: list[tuple[int, list[int]]], tag: str = "reduce"):
    """Sum-reduce each group onto its source, in ascending rank order."""
    for src, group in bmap:
        if comm.rank in group and comm.rank != src:
            if y is None:
                raise ContractError(f"reduce contributor {comm.rank} holds no data")
            comm.send(y, src, tag)
    out = None
    for src, group in bmap:
        if comm.rank != src:
            continue
        for r in group:
            v = y if r == src else comm.recv(r, tag)
            out = np.array(v, copy=True) if out is None else out + v
    return out


def _single_group(root: int, group: Sequence[int]):
    group = sorted(set(int(g) for g in group))
    if root not in group:
        raise ContractError(f"root {root} is not in group {group}")
    return [(root, group)]


def broadcast(comm: Comm, x, root: int, group: Sequence[int], tag: str = "bcast"):
    return broadcast_along(comm, x, _single_group(root, group), tag)


def broadcast_adjoint(comm: Comm, dy, root: int, group: Sequence[int], tag: str = "bcast*"):
    return reduce_along(comm, dy, _single_group(root, group), tag)


def sum_reduce(comm: Comm, x, root: int, group: Sequence[int], tag: str = "reduce"):
    return reduce_along(comm, x, _single_group(root, group), tag)


def sum_reduce_adjoint(comm: Comm, dy, root: int, group: Sequence[int], tag: str = "reduce*"):
    return broadcast_along(comm, dy, _single_group(root, group), tag)


def all_reduce(comm: Comm, x, group: Sequence[int], root: int | None = None,
               tag: str = "allreduce"):
    """Sum-reduce onto ``root`` (lowest rank by default) then broadcast back.  Self-adjoint."""
    group = sorted(group)
    root = group[0] if root is None else root
    if comm.rank not in group:
        return None
    s = sum_reduce(comm, x, root, group, tag + ".r")
    return broadcast(comm, s, root, group, tag + ".b")


all_reduce_adjoint = all_reduce


# -- generalized all-to-all -----------------------------------------------------


def repartition(comm: Comm, x, src: Partition, dst: Partition, tag: str = "repartition"):
    """Move a distributed tensor from partition ``src`` to partition ``dst``.

    Destination blocks are assembled by adding received overlaps into zeros,
    which is also what the reverse repartition (the adjoint) does.
    """
    pmap = overlap(src, dst)
    local = {}
    if comm.rank in src:
        offset = src.bulk_range(comm.rank).start
        if x is None or tuple(x.shape) != src.bulk_range(comm.rank).shape:
            raise ContractError(
                f"worker {comm.rank} block {None if x is None else x.shape} does not match "
                f"its bulk {src.bulk_range(comm.rank).shape}")
        for d, r in pmap.sends(comm.rank):
            block = x[r.shift(offset).slices()]
            if d == comm.rank:
                local[d] = block
            else:
                comm.send(block, d, tag)
    if comm.rank not in dst:
        return None
    offset = dst.bulk_range(comm.rank).start
    parts = [(r, local[s] if s == comm.rank else comm.recv(s, tag))
             for s, r in pmap.receives(comm.rank)]
    dtype = parts[0][1].dtype if parts else np.float64
    out = np.zeros(dst.bulk_range(comm.rank).shape, dtype=dtype)
    for r, block in parts:
        add_slice(out, r.shift(offset), block)
    return out


def repartition_adjoint(comm: Comm, dy, src: Partition, dst: Partition,
                        tag: str = "repartition*"):
    return repartition(comm, dy, dst, src, tag)

