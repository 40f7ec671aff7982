import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from linmove.tensor import (ContractError, IndexRange, add_slice, assign_slice, inner_product,
                            norm, rel_error, slice_block, zeros)
from oracles import loop_inner


finite = st.floats(-1e3, 1e3, allow_nan=False, width=64)


def test_inner_product_small():
    assert inner_product(np.array([1.0, 2, 3]), np.array([4.0, 5, 6])) == 32.0


def test_inner_product_zero_annihilates():
    x = np.random.default_rng(0).uniform(-1, 1, (3, 4))
    assert inner_product(x, np.zeros_like(x)) == 0.0


def test_inner_product_matches_loop_bitwise():
    rng = np.random.default_rng(3)
    a, b = rng.uniform(-1, 1, (3, 4, 5)), rng.uniform(-1, 1, (3, 4, 5))
    assert inner_product(a, b) == loop_inner(a, b)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6), elements=finite),
       st.data())
def test_inner_product_symmetric_and_loop_exact(a, data):
    b = data.draw(hnp.arrays(np.float64, a.shape, elements=finite))
    assert inner_product(a, b) == inner_product(b, a)
    assert inner_product(a, b) == loop_inner(a, b)


def test_inner_product_shape_mismatch():
    with pytest.raises(ContractError):
        inner_product(np.zeros(3), np.zeros(4))


def test_norm():
    assert norm(np.array([3.0, 4.0])) == 5.0


class TestIndexRange:
    def test_basic(self):
        r = IndexRange((1, 0), (3, 2))
        assert r.shape == (2, 2) and r.size == 4 and not r.empty
        assert str(r) == "[1,3)x[0,2)"

    def test_empty_allowed(self):
        assert IndexRange((2,), (2,)).empty

    def test_start_after_stop_rejected(self):
        with pytest.raises(ContractError):
            IndexRange((3,), (2,))

    def test_intersect_and_shift(self):
        a, b = IndexRange((0, 0), (4, 4)), IndexRange((2, 3), (6, 5))
        assert a.intersect(b) == IndexRange((2, 3), (4, 4))
        assert IndexRange((0,), (2,)).intersect(IndexRange((3,), (5,))).empty
        assert b.shift((2, 3)) == IndexRange((0, 0), (4, 2))

    def test_within(self):
        assert IndexRange((0,), (4,)).within((4,))
        assert not IndexRange((0,), (5,)).within((4,))


class TestSlices:
    def test_slice_copy(self):
        t = np.arange(4.0)
        s = slice_block(t, IndexRange((1,), (3,)))
        np.testing.assert_array_equal(s, [1.0, 2.0])
        s[0] = 99
        assert t[1] == 1.0

    def test_empty_and_full(self):
        t = np.arange(6.0).reshape(2, 3)
        assert slice_block(t, IndexRange((1, 1), (1, 3))).shape == (0, 2)
        np.testing.assert_array_equal(slice_block(t, IndexRange.full(t.shape)), t)

    def test_out_of_bounds(self):
        with pytest.raises(ContractError):
            slice_block(np.zeros(4), IndexRange((2,), (5,)))

    def test_add_on_zero_equals_assign(self):
        r = IndexRange((1, 0), (3, 2))
        src = np.array([[1.0, 2], [3, 4]])
        a = add_slice(zeros((4, 3)), r, src)
        b = assign_slice(zeros((4, 3)), r, src)
        np.testing.assert_array_equal(a, b)

    def test_add_then_subtract_restores(self):
        rng = np.random.default_rng(1)
        t = rng.integers(-5, 5, (5, 5)).astype(float)
        orig = t.copy()
        r = IndexRange((1, 2), (4, 5))
        src = rng.integers(-5, 5, r.shape).astype(float)
        add_slice(t, r, src)
        add_slice(t, r, -src)
        np.testing.assert_array_equal(t, orig)

    def test_slice_assign_round_trip(self):
        t = np.random.default_rng(2).uniform(size=(4, 5))
        r = IndexRange((1, 1), (3, 4))
        np.testing.assert_array_equal(assign_slice(t.copy(), r, slice_block(t, r)), t)

    def test_add_slice_loop_oracle(self):
        rng = np.random.default_rng(5)
        t = rng.uniform(size=(5, 6))
        r = IndexRange((1, 2), (4, 5))
        src = rng.uniform(size=r.shape)
        want = t.copy()
        for i in range(3):
            for j in range(3):
                want[1 + i, 2 + j] += src[i, j]
        np.testing.assert_array_equal(add_slice(t, r, src), want)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            assign_slice(np.zeros(4), IndexRange((0,), (2,)), np.zeros(3))

    def test_rank_zero_disallowed(self):
        with pytest.raises(ContractError):
            zeros(())


def test_rel_error():
    assert rel_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert rel_error(np.array([0.0]), np.array([0.0])) == 0.0
    assert rel_error(np.array([1.1]), np.array([1.0])) == pytest.approx(0.1)
