import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from linmove.catalog import asymmetric_halo_case, halo_exchange_op, trim_shim_op
from linmove.comm import spawn
from linmove.halo import (HaloExchanger, HaloSpec, KernelSpec, compute_halo, required_input_range,
                          trim_shim, trim_shim_adjoint)
from linmove.memory_ops import adjoint_test
from linmove.partition import decompose
from linmove.tensor import ContractError, IndexRange
from oracles import dense_matrix, enumerate_halos, oracle_is_valid, random_halo_configs


def halo_rows(n, k, s=1, d=1, pl=0, pr=None, p=1):
    kernel = KernelSpec.make(1, k, s, d, pl, pr)
    ip = decompose((n,), (p,))
    op = decompose(kernel.output_shape((n,)), (p,))
    return [compute_halo((n,), kernel, ip, op, w).rows()[0] for w in range(p)]


class TestWorkedExamples:
    def test_uniform_centered_padded(self):
        rows = halo_rows(11, 5, pl=2, p=3)
        assert [(lh, rh) for lh, rh, _, _ in rows] == [(0, 2), (2, 2), (2, 0)]
        assert all(lt == rt == 0 for _, _, lt, rt in rows)

    def test_nonuniform_unpadded(self):
        assert halo_rows(11, 5, p=3) == [(0, 3, 0, 0), (1, 1, 0, 0), (3, 0, 0, 0)]

    def test_right_looking_pool_n20(self):
        rows = halo_rows(20, 2, s=2, p=6)
        assert [(lh, rh) for lh, rh, _, _ in rows] == [(0, 0), (0, 0), (0, 1), (0, 2), (0, 1), (0, 0)]
        assert [lt for _, _, lt, _ in rows] == [0, 0, 0, 1, 2, 1]
        # the fourth worker (index 3): one extra input on the left, halo of 2 on the right
        assert rows[3] == (0, 2, 1, 0)

    def test_simple_pooling_n10(self):
        assert halo_rows(10, 2, s=2, p=3) == [(0, 0, 0, 0), (0, 1, 0, 0), (0, 0, 1, 0)]

    def test_required_input_range(self):
        k = KernelSpec.make(1, 2, 2)
        assert required_input_range(IndexRange((2,), (4,)), k) == IndexRange((4,), (8,))
        c = KernelSpec.make(1, 5, padding=2)
        assert required_input_range(IndexRange((0,), (4,)), c) == IndexRange((-2,), (6,))
        assert required_input_range(IndexRange((0,), (4,)), c, (11,)) == IndexRange((0,), (6,))

    def test_single_worker_has_nothing(self):
        assert halo_rows(9, 3, pl=1, p=1) == [(0, 0, 0, 0)]


def test_matches_enumeration_oracle():
    checked = valid = 0
    for n, k, s, d, pl, pr, p in random_halo_configs(1500, seed=3):
        want = enumerate_halos(n, k, s, d, pl, pr, p)
        if oracle_is_valid(n, p, want):
            assert halo_rows(n, k, s, d, pl, pr, p) == want, (n, k, s, d, pl, pr, p)
            valid += 1
        else:
            with pytest.raises(ContractError, match="too fine"):
                halo_rows(n, k, s, d, pl, pr, p)
        checked += 1
    assert valid >= 1000


def test_partition_too_fine():
    with pytest.raises(ContractError, match="too fine"):
        halo_rows(12, 7, p=6)


class TestHaloSpec:
    def test_halo_and_trim_on_same_side(self):
        with pytest.raises(ContractError):
            HaloSpec((1,), (0,), (1,), (0,))

    def test_negative(self):
        with pytest.raises(ContractError):
            HaloSpec((-1,), (0,), (0,), (0,))


def test_mismatched_partitions():
    k = KernelSpec.make(1, 2, 2)
    with pytest.raises(ContractError):
        compute_halo((8,), k, decompose((8,), (2,)), decompose((4,), (4,)), 0)
    with pytest.raises(ContractError):
        compute_halo((8,), k, decompose((8,), (2,)), decompose((5,), (2,)), 0)


def asymmetric_rows():
    part, kernel = asymmetric_halo_case()
    out = part.with_shape(kernel.output_shape(part.global_shape))
    return [compute_halo(part.global_shape, kernel, part, out, w) for w in range(4)]


def test_asymmetric_case_widths():
    specs = asymmetric_rows()
    assert [s.right_halo[0] for s in specs[:2]] == [2, 2]
    assert [s.left_halo[0] for s in specs[2:]] == [4, 4]
    assert [s.left_halo[1] for s in specs] == [0, 3, 0, 3]
    assert all(s.right_halo[1] == 0 for s in specs)


def exchanged(part, kernel, x):
    """Run allocate+exchange on every worker and return the buffers and specs."""
    def prog(c):
        ex = HaloExchanger(c, part, kernel)
        if not ex.active:
            return None
        buf = ex.exchange(ex.allocate(x[part.bulk_range(c.rank).slices()].copy()))
        return buf, ex.spec

    return spawn(max(part.members) + 1, prog)


def assert_matches_global(part, kernel, x):
    for rank, (buf, spec) in enumerate(exchanged(part, kernel, x)):
        r = part.bulk_range(rank)
        sl = tuple(slice(a - lh, b + rh) for a, b, lh, rh in
                   zip(r.start, r.stop, spec.left_halo, spec.right_halo))
        np.testing.assert_array_equal(buf, x[sl])


def test_exchange_asymmetric_case_matches_global_slices():
    part, kernel = asymmetric_halo_case()
    x = np.random.default_rng(0).uniform(-1, 1, part.global_shape)
    assert_matches_global(part, kernel, x)


def test_corner_arrives_without_diagonal_message():
    part, kernel = asymmetric_halo_case()
    x = np.arange(np.prod(part.global_shape), dtype=float).reshape(part.global_shape)
    buf, spec = exchanged(part, kernel, x)[3]
    # worker 3 (bottom right) has halos above and to the left; its top-left corner is worker 0's
    corner = buf[: spec.left_halo[0], : spec.left_halo[1]]
    r0 = part.bulk_range(0)
    np.testing.assert_array_equal(corner, x[r0.stop[0] - 4:r0.stop[0], r0.stop[1] - 3:r0.stop[1]])


@settings(max_examples=25, deadline=None)
@given(st.integers(6, 14), st.integers(6, 14), st.integers(1, 3), st.integers(1, 3),
       st.integers(1, 4), st.integers(1, 4), st.integers(0, 2))
def test_exchange_random_2d(n0, n1, p0, p1, k0, k1, pad):
    kernel = KernelSpec.make(2, (k0, k1), padding=pad)
    shape = (n0, n1)
    part = decompose(shape, (p0, p1))
    out = kernel.output_shape(shape)
    if any(o < p for o, p in zip(out, (p0, p1))):
        return
    try:
        for w in part.members:
            compute_halo(shape, kernel, part, part.with_shape(out), w)
    except ContractError:
        return
    x = np.random.default_rng(n0 * n1).uniform(-1, 1, shape)
    assert_matches_global(part, kernel, x)


def test_adjoint_adds_into_neighbor_bulk_and_clears():
    part = decompose((4,), (2,))
    kernel = KernelSpec.make(1, 3, padding=1)

    def prog(c):
        ex = HaloExchanger(c, part, kernel)
        buf = np.zeros(ex.buffer_shape)
        if c.rank == 0:
            buf[-1] = 5.0
        else:
            buf[:] = 1.0
        return ex.exchange_adjoint(buf)

    b0, b1 = spawn(2, prog)
    np.testing.assert_array_equal(b0, [0.0, 1.0, 0.0])
    np.testing.assert_array_equal(b1, [0.0, 6.0, 1.0])


HALO_OPS = [
    halo_exchange_op(*asymmetric_halo_case(), name="halo[asymmetric]"),
    halo_exchange_op(decompose((20,), (6,)), KernelSpec.make(1, 2, 2), name="halo[n20]"),
    halo_exchange_op(decompose((11,), (3,)), KernelSpec.make(1, 5, padding=2), name="halo[n11]"),
    halo_exchange_op(decompose((9, 8, 7), (2, 2, 2)), KernelSpec.make(3, 3, padding=1),
                     name="halo[3d]"),
]


@pytest.mark.parametrize("op", HALO_OPS, ids=lambda o: o.name)
def test_exchange_adjoint_harness(op):
    rep = adjoint_test(op, trials=20, seed=5)
    assert rep.passed, rep.line()


@pytest.mark.parametrize("op", HALO_OPS[1:3], ids=lambda o: o.name)
def test_exchange_dense_transpose(op):
    F = dense_matrix(op.forward, op.domain_shape)
    Fs = dense_matrix(op.adjoint, op.codomain_shape)
    np.testing.assert_array_equal(Fs, F.T)


class TestTrimShim:
    spec = HaloSpec((0, 0), (0, 0), (1, 0), (0, 2))

    def test_forward(self):
        x = np.arange(12.0).reshape(3, 4)
        np.testing.assert_array_equal(trim_shim(x, self.spec), x[1:, :2])

    def test_adjoint_pads_zeros(self):
        y = trim_shim_adjoint(np.ones((2, 2)), self.spec)
        assert y.shape == (3, 4) and y.sum() == 4 and y[0].sum() == 0

    def test_harness(self):
        assert adjoint_test(trim_shim_op((3, 4), self.spec), trials=20).passed

    def test_over_trim(self):
        with pytest.raises(ContractError):
            trim_shim(np.zeros((2,)), HaloSpec((0,), (0,), (2,), (1,)))


def test_one_worker_exchange_is_identity():
    part = decompose((5, 5), (1, 1))
    kernel = KernelSpec.make(2, 3, padding=1)
    x = np.random.default_rng(1).uniform(size=(5, 5))

    def prog(c):
        ex = HaloExchanger(c, part, kernel)
        return ex.exchange(ex.allocate(x.copy()))

    np.testing.assert_array_equal(spawn(1, prog)[0], x)
