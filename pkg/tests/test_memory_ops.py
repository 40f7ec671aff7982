import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from linmove.memory_ops import (LinearOp, SubsetPair, add, add_adjoint, add_op, adjoint_test,
                                allocate, allocate_op, clear, clear_op, compose, copy,
                                copy_adjoint, copy_op, deallocate, deallocate_op, identity_op,
                                move, move_adjoint, move_op)
from linmove.tensor import ContractError, inner_product
from oracles import dense_matrix


def arr(*v):
    return np.array(v, dtype=float)


class TestPrimitiveExamples:
    def test_allocate(self):
        np.testing.assert_array_equal(allocate(arr(1, 2), 2), arr(1, 2, 0, 0))

    def test_deallocate(self):
        np.testing.assert_array_equal(deallocate(arr(1, 2, 3, 4), (2, 4)), arr(1, 2))

    def test_clear_and_idempotence(self):
        np.testing.assert_array_equal(clear(arr(1, 2, 3), (1, 2)), arr(1, 0, 3))
        x = arr(4, 5, 6)
        np.testing.assert_array_equal(clear(clear(x, (0, 2)), (0, 2)), clear(x, (0, 2)))

    def test_add_and_reverse(self):
        pair = SubsetPair(0, 1)
        np.testing.assert_array_equal(add(arr(1, 2), pair), arr(1, 3))
        np.testing.assert_array_equal(add_adjoint(arr(1, 2), pair), arr(3, 2))

    def test_copy_in_place_and_adjoint(self):
        pair = SubsetPair(0, 1)
        np.testing.assert_array_equal(copy(arr(5, 9), pair), arr(5, 5))
        np.testing.assert_array_equal(copy_adjoint(arr(1, 2), pair), arr(3, 0))

    def test_copy_out_of_place(self):
        pair = SubsetPair((0, 2), (3, 5))
        np.testing.assert_array_equal(copy(arr(1, 2, 3), pair, "out_of_place"), arr(1, 2, 3, 1, 2))

    def test_move_in_place(self):
        np.testing.assert_array_equal(move(arr(5, 9), SubsetPair(0, 1)), arr(0, 5))

    def test_move_out_of_place(self):
        pair = SubsetPair((1, 2), (3, 4))
        np.testing.assert_array_equal(move(arr(1, 2, 3), pair, "out_of_place"), arr(1, 3, 2))

    def test_move_adjoint_after_move_restores_when_target_empty(self):
        pair = SubsetPair((0, 2), (3, 5))
        x = arr(1, 2, 7, 0, 0)
        np.testing.assert_array_equal(move_adjoint(move(x, pair), pair), x)


class TestContracts:
    def test_overlapping_pair(self):
        with pytest.raises(ContractError):
            add(arr(1, 2, 3), SubsetPair((0, 2), (1, 3)))

    def test_unequal_extents(self):
        with pytest.raises(ContractError):
            add(arr(1, 2, 3), SubsetPair((0, 1), (1, 3)))

    def test_out_of_bounds(self):
        with pytest.raises(ContractError):
            clear(arr(1, 2), (1, 3))
        with pytest.raises(ContractError):
            deallocate(arr(1, 2), (1, 3))
        with pytest.raises(ContractError):
            allocate(arr(1, 2), -1)

    def test_unknown_mode(self):
        with pytest.raises(ContractError):
            copy(arr(1, 2), SubsetPair(0, 1), "sideways")

    def test_harness_arguments(self):
        with pytest.raises(ContractError):
            adjoint_test(identity_op((3,)), trials=0)
        with pytest.raises(ContractError):
            adjoint_test(identity_op((3,)), epsilon=0.0)

    def test_harness_rejects_wrong_output_shape(self):
        bad = LinearOp("bad", lambda x: x[:2], lambda y: y, (3,), (3,))
        with pytest.raises(ContractError):
            adjoint_test(bad, trials=1)


def flat_ops(m=7):
    h = m // 2
    return [
        identity_op((m,)),
        allocate_op(m, 3),
        deallocate_op(m, (1, 4)),
        clear_op(m, (2, 5)),
        add_op(m, SubsetPair((0, h), (h, 2 * h))),
        copy_op(m, SubsetPair((0, h), (h, 2 * h))),
        copy_op(m, SubsetPair((1, 3), (m, m + 2)), "out_of_place"),
        move_op(m, SubsetPair((0, h), (h, 2 * h))),
        move_op(m, SubsetPair((1, 3), (m, m + 2)), "out_of_place"),
    ]


@pytest.mark.parametrize("op", flat_ops(), ids=lambda o: o.name)
def test_adjoint_harness(op):
    rep = adjoint_test(op, trials=100, seed=4)
    assert rep.passed, rep.line()


@pytest.mark.parametrize("op", flat_ops(6), ids=lambda o: o.name)
def test_adjoint_equals_dense_transpose(op):
    F = dense_matrix(op.forward, op.domain_shape)
    Fs = dense_matrix(op.adjoint, op.codomain_shape)
    np.testing.assert_array_equal(Fs, F.T)


@pytest.mark.parametrize("op", flat_ops(), ids=lambda o: o.name)
def test_integer_data_exact(op):
    rng = np.random.default_rng(9)
    x = rng.integers(-9, 9, op.domain_shape).astype(float)
    y = rng.integers(-9, 9, op.codomain_shape).astype(float)
    assert inner_product(op.forward(x), y) == inner_product(x, op.adjoint(y))


@pytest.mark.parametrize("op", flat_ops(), ids=lambda o: o.name)
def test_linearity(op):
    rng = np.random.default_rng(2)
    x, z = rng.uniform(-1, 1, (2,) + op.domain_shape)
    np.testing.assert_allclose(op.forward(2 * x - 3 * z), 2 * op.forward(x) - 3 * op.forward(z),
                               rtol=1e-14, atol=1e-14)


def test_identity_reports_zero():
    rep = adjoint_test(identity_op((5,)), trials=10)
    assert rep.max_rel_err == 0.0 and rep.passed
    assert rep.line().endswith("PASS")


def test_wrong_adjoint_detected():
    op = LinearOp("add-bad", lambda x: add(x, SubsetPair(0, 1)), lambda y: add(y, SubsetPair(0, 1)),
                  (3,), (3,))
    assert not adjoint_test(op, trials=20).passed


def test_zero_operator_counts_as_pass():
    op = LinearOp("zero", lambda x: 0 * x, lambda y: 0 * y, (3,), (3,))
    assert adjoint_test(op, trials=3).max_rel_err == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(4, 9), st.lists(st.integers(0, 3), min_size=2, max_size=4), st.integers(0, 10**6))
def test_composition_law(m, picks, seed):
    """Random chains of shape-preserving primitives: (G F)* == F* G*."""
    h = m // 2
    pool = [clear_op(m, (0, h)), add_op(m, SubsetPair((0, h), (h, 2 * h))),
            copy_op(m, SubsetPair((h, 2 * h), (0, h))), move_op(m, SubsetPair((0, 1), (m - 1, m)))]
    chain = compose(*(pool[i] for i in picks))
    assert adjoint_test(chain, trials=5, seed=seed).passed
    F = dense_matrix(chain.forward, chain.domain_shape)
    Fs = dense_matrix(chain.adjoint, chain.codomain_shape)
    np.testing.assert_array_equal(Fs, F.T)


def test_composition_shape_check():
    with pytest.raises(ContractError):
        allocate_op(3, 1) @ allocate_op(3, 1)


def test_adjoint_property_swaps_roles():
    op = allocate_op(3, 2)
    assert op.H.domain_shape == (5,) and op.H.codomain_shape == (3,)
    np.testing.assert_array_equal(op.H(arr(1, 2, 3, 4, 5)), arr(1, 2, 3))
