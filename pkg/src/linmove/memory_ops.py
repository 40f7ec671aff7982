"""Primitive memory operators as explicit forward/adjoint pairs, and the adjoint test.

All primitives act on flat (1-D) tensors.  Subsets are half-open
:class:`~linmove.tensor.IndexRange` objects of rank 1.

===========================  ==============================  ==========================
operator                     forward                         adjoint
===========================  ==============================  ==========================
allocate ``A_b``             ``[x; 0_b]``                    deallocate ``D_b``
clear ``K_b``                ``x_b <- 0``                    itself
add ``S_{a->b}``             ``x_b <- x_a + x_b``            ``S_{b->a}``
copy, in place               ``S_{a->b} K_b``                ``K_b S_{b->a}``
copy, out of place           ``S_{a->b} A_b``                ``D_b S_{b->a}``
move, in place               ``K_a S_{a->b} K_b``            ``K_b S_{b->a} K_a``
move, out of place           ``D_a S_{a->b} A_b``            ``D_b S_{b->a} A_a``
===========================  ==============================  ==========================
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .tensor import ContractError, IndexRange, inner_product

Shape = tuple[int, ...]
# A domain/codomain is a single tensor or a list of per-worker tensors (None = no data).
ShapeSpec = Union[Shape, list]


def _as_range(r) -> IndexRange:
    if isinstance(r, IndexRange):
        return r
    if isinstance(r, int):
        return IndexRange((r,), (r + 1,))
    lo, hi = r
    return IndexRange((lo,), (hi,))


def _check_flat(x: np.ndarray, r: IndexRange, what: str):
    if x.ndim != 1:
        raise ContractError(f"{what} acts on flat tensors, got shape {x.shape}")
    if r.ndim != 1 or not r.within(x.shape):
        raise ContractError(f"{what}: range {r} out of bounds for length {x.shape[0]}")


@dataclass(frozen=True)
class SubsetPair:
    """Source subset ``a`` and destination subset ``b`` of one host tensor."""

    a: IndexRange
    b: IndexRange

    def __init__(self, a, b):
        object.__setattr__(self, "a", _as_range(a))
        object.__setattr__(self, "b", _as_range(b))

    @property
    def disjoint(self) -> bool:
        return self.a.intersect(self.b).empty

    def reversed(self) -> "SubsetPair":
        return SubsetPair(self.b, self.a)

    def validate(self, n: int | None = None, out_of_place: bool = False):
        if self.a.ndim != 1 or self.b.ndim != 1:
            raise ContractError("subset pairs are flat ranges")
        if self.a.size != self.b.size:
            raise ContractError(f"subset extents differ: {self.a} vs {self.b}")
        if not out_of_place and not self.disjoint:
            raise ContractError(f"subsets overlap: {self.a} and {self.b}")
        if n is not None and not out_of_place and not (self.a.within((n,)) and self.b.within((n,))):
            raise ContractError(f"subsets {self.a}, {self.b} exceed length {n}")


# -- primitives ---------------------------------------------------------------


def allocate(x: np.ndarray, extent: int, at: int | None = None) -> np.ndarray:
    """Bring ``extent`` zeros into scope, appended (default) or inserted before index ``at``."""
    x = np.asarray(x)
    if x.ndim != 1:
        raise ContractError("allocate acts on flat tensors")
    if extent < 0:
        raise ContractError(f"negative allocation extent {extent}")
    at = x.shape[0] if at is None else at
    if not 0 <= at <= x.shape[0]:
        raise ContractError(f"allocation position {at} outside [0, {x.shape[0]}]")
    return np.concatenate([x[:at], np.zeros(extent, dtype=x.dtype), x[at:]])


def deallocate(y: np.ndarray, b) -> np.ndarray:
    """Drop subset ``b`` from ``y``."""
    b = _as_range(b)
    y = np.asarray(y)
    _check_flat(y, b, "deallocate")
    return np.concatenate([y[: b.start[0]], y[b.stop[0]:]])


def clear(x: np.ndarray, b) -> np.ndarray:
    b = _as_range(b)
    _check_flat(x, b, "clear")
    out = np.array(x, copy=True)
    out[b.slices()] = 0
    return out


def add(x: np.ndarray, pair: SubsetPair) -> np.ndarray:
    x = np.asarray(x)
    pair.validate(x.shape[0] if x.ndim == 1 else None)
    _check_flat(x, pair.a, "add")
    out = x.copy()
    out[pair.b.slices()] += x[pair.a.slices()]
    return out


def add_adjoint(y: np.ndarray, pair: SubsetPair) -> np.ndarray:
    return add(y, pair.reversed())


def copy(x: np.ndarray, pair: SubsetPair, mode: str = "in_place") -> np.ndarray:
    """Copy ``x_a`` to ``x_b``.

    Out of place, ``pair.b`` is ignored: the destination is allocated at the end
    of the buffer, so the result is ``[x; x_a]``.
    """
    if mode == "in_place":
        return add(clear(x, pair.b), pair)
    if mode == "out_of_place":
        pair.validate(out_of_place=True)
        n = np.asarray(x).shape[0]
        return add(allocate(x, pair.a.size), SubsetPair(pair.a, _tail(n, pair.a.size)))
    raise ContractError(f"unknown copy mode {mode!r}")


def copy_adjoint(y: np.ndarray, pair: SubsetPair, mode: str = "in_place") -> np.ndarray:
    if mode == "in_place":
        return clear(add(y, pair.reversed()), pair.b)
    if mode == "out_of_place":
        n = np.asarray(y).shape[0] - pair.a.size
        b = _tail(n, pair.a.size)
        return deallocate(add(y, SubsetPair(b, pair.a)), b)
    raise ContractError(f"unknown copy mode {mode!r}")


def move(x: np.ndarray, pair: SubsetPair, mode: str = "in_place") -> np.ndarray:
    """Move ``x_a`` to ``x_b``.

    Out of place the moved block ends up appended after the remaining entries:
    ``[x without a; x_a]``.
    """
    if mode == "in_place":
        return clear(add(clear(x, pair.b), pair), pair.a)
    if mode == "out_of_place":
        pair.validate(out_of_place=True)
        n = np.asarray(x).shape[0]
        staged = add(allocate(x, pair.a.size), SubsetPair(pair.a, _tail(n, pair.a.size)))
        return deallocate(staged, pair.a)
    raise ContractError(f"unknown move mode {mode!r}")


def move_adjoint(y: np.ndarray, pair: SubsetPair, mode: str = "in_place") -> np.ndarray:
    if mode == "in_place":
        return move(y, pair.reversed(), "in_place")
    if mode == "out_of_place":
        n = np.asarray(y).shape[0]
        staged = allocate(y, pair.a.size, at=pair.a.start[0])
        b = _tail(n, pair.a.size)
        return deallocate(add(staged, SubsetPair(b, pair.a)), b)
    raise ContractError(f"unknown move mode {mode!r}")


def _tail(n: int, extent: int) -> IndexRange:
    return IndexRange((n,), (n + extent,))


# -- linear operators ---------------------------------------------------------


@dataclass
class LinearOp:
    """A linear map together with its hand-written adjoint.

    ``domain_shape``/``codomain_shape`` are either a single shape or a list of
    per-worker shapes, where ``None`` marks a worker that holds no data.
    """

    name: str
    forward: Callable
    adjoint: Callable
    domain_shape: ShapeSpec
    codomain_shape: ShapeSpec
    meta: dict = field(default_factory=dict)

    def __call__(self, x):
        return self.forward(x)

    @property
    def H(self) -> "LinearOp":
        return LinearOp(f"{self.name}*", self.adjoint, self.forward,
                        self.codomain_shape, self.domain_shape)

    def __matmul__(self, other: "LinearOp") -> "LinearOp":
        """Composition ``self ∘ other``; the adjoint is ``other* ∘ self*``."""
        if not _same_spec(other.codomain_shape, self.domain_shape):
            raise ContractError(
                f"cannot compose {self.name} after {other.name}: "
                f"{other.codomain_shape} vs {self.domain_shape}")
        return LinearOp(
            f"{self.name}.{other.name}",
            lambda x: self.forward(other.forward(x)),
            lambda y: other.adjoint(self.adjoint(y)),
            other.domain_shape,
            self.codomain_shape,
        )


def _same_spec(a, b) -> bool:
    if isinstance(a, list) or isinstance(b, list):
        if not (isinstance(a, list) and isinstance(b, list)) or len(a) != len(b):
            return False
        return all(_same_spec(p, q) for p, q in zip(a, b))
    if a is None or b is None:
        return a is b
    return tuple(a) == tuple(b)


def identity_op(shape: Shape) -> LinearOp:
    shape = tuple(shape)
    return LinearOp("identity", lambda x: np.array(x, copy=True),
                    lambda y: np.array(y, copy=True), shape, shape)


def allocate_op(m: int, extent: int) -> LinearOp:
    b = _tail(m, extent)
    return LinearOp("allocate", lambda x: allocate(x, extent), lambda y: deallocate(y, b),
                    (m,), (m + extent,))


def deallocate_op(n: int, b) -> LinearOp:
    b = _as_range(b)
    return LinearOp("deallocate", lambda y: deallocate(y, b),
                    lambda x: allocate(x, b.size, at=b.start[0]), (n,), (n - b.size,))


def clear_op(m: int, b) -> LinearOp:
    b = _as_range(b)
    return LinearOp("clear", lambda x: clear(x, b), lambda y: clear(y, b), (m,), (m,))


def add_op(m: int, pair: SubsetPair) -> LinearOp:
    pair.validate(m)
    return LinearOp("add", lambda x: add(x, pair), lambda y: add_adjoint(y, pair), (m,), (m,))


def copy_op(m: int, pair: SubsetPair, mode: str = "in_place") -> LinearOp:
    n = m if mode == "in_place" else m + pair.a.size
    pair.validate(m if mode == "in_place" else None, out_of_place=mode != "in_place")
    return LinearOp(f"copy[{mode}]", lambda x: copy(x, pair, mode),
                    lambda y: copy_adjoint(y, pair, mode), (m,), (n,))


def move_op(m: int, pair: SubsetPair, mode: str = "in_place") -> LinearOp:
    pair.validate(m if mode == "in_place" else None, out_of_place=mode != "in_place")
    return LinearOp(f"move[{mode}]", lambda x: move(x, pair, mode),
                    lambda y: move_adjoint(y, pair, mode), (m,), (m,))


# -- adjoint test -------------------------------------------------------------


def flatten(v) -> np.ndarray:
    """Concatenate a tensor or a list of (possibly absent) tensors into one flat vector."""
    if isinstance(v, (list, tuple)):
        parts = [np.ravel(p) for p in v if p is not None]
        if not parts:
            return np.zeros(0)
        return np.concatenate(parts)
    return np.ravel(v)


def random_like(spec: ShapeSpec, rng: np.random.Generator, dtype=np.float64):
    """Uniform [-1, 1] data shaped like ``spec``."""
    if isinstance(spec, list):
        return [None if s is None else random_like(s, rng, dtype) for s in spec]
    return rng.uniform(-1.0, 1.0, size=tuple(spec)).astype(dtype)


def _spec_matches(v, spec) -> bool:
    if isinstance(spec, list):
        return isinstance(v, (list, tuple)) and len(v) == len(spec) and all(
            _spec_matches(p, s) for p, s in zip(v, spec))
    if spec is None:
        return v is None
    return v is not None and tuple(np.shape(v)) == tuple(spec)


@dataclass
class AdjointReport:
    op: str
    trials: int
    max_rel_err: float
    epsilon: float
    errors: list[float] = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.epsilon

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.op}, {self.trials}, {self.max_rel_err:.3e}, {self.epsilon:.0e}, {status}"

    __str__ = line


REPORT_HEADER = "op, trials, max_rel_err, epsilon, status"

DEFAULT_EPSILON = {np.dtype(np.float64): 1e-12, np.dtype(np.float32): 1e-4}


def relative_adjoint_error(op: LinearOp, x, y) -> float:
    fx = op.forward(x)
    fty = op.adjoint(y)
    if not _spec_matches(fx, op.codomain_shape):
        raise ContractError(f"{op.name}: forward output does not match codomain {op.codomain_shape}")
    if not _spec_matches(fty, op.domain_shape):
        raise ContractError(f"{op.name}: adjoint output does not match domain {op.domain_shape}")
    fx, fty = flatten(fx), flatten(fty)
    x, y = flatten(x), flatten(y)
    num = abs(inner_product(fx, y) - inner_product(x, fty))
    den = max(np.sqrt(inner_product(fx, fx) * inner_product(y, y)),
              np.sqrt(inner_product(x, x) * inner_product(fty, fty)))
    if den == 0.0:
        return 0.0 if num == 0.0 else float("inf")
    return float(num / den)


def adjoint_test(op: LinearOp, trials: int = 100, epsilon: float = 1e-12,
                 seed: int = 0, dtype=np.float64) -> AdjointReport:
    """Check ``<Fx, y> == <x, F*y>`` on ``trials`` seeded random pairs.

    The error per trial is normalised by ``max(|Fx||y|, |x||F*y|)``; the report
    passes iff the largest error is below ``epsilon``.
    """
    if trials < 1:
        raise ContractError("adjoint_test needs at least one trial")
    if not epsilon > 0:
        raise ContractError("epsilon must be positive")
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(trials):
        x = random_like(op.domain_shape, rng, dtype)
        y = random_like(op.codomain_shape, rng, dtype)
        errors.append(relative_adjoint_error(op, x, y))
    return AdjointReport(op.name, trials, max(errors), epsilon, errors)


def compose(*ops: LinearOp) -> LinearOp:
    """``compose(G, F)`` is ``G ∘ F``."""
    out = ops[-1]
    for op in reversed(ops[:-1]):
        out = op @ out
    return out
