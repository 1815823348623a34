import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from iomtfed.numeric import (
    SeededRng,
    ShapeError,
    _matmul_loop,
    apply_sigmoid,
    apply_tanh,
    as_matrix,
    hadamard,
    init_uniform,
    matmul,
)

GOLDEN_SEED7 = [[-0.006236502608813435, -0.014770832752163066, -0.027403659833279845, -0.05252921819835717]]

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def matrices(rows, cols):
    return arrays(np.float64, (rows, cols), elements=finite)


def test_matmul_examples():
    assert np.array_equal(matmul(np.eye(2), as_matrix([[3], [4]])), [[3], [4]])
    assert np.array_equal(matmul(as_matrix([[1, 2], [3, 4]]), as_matrix([[0], [0]])), [[0], [0]])
    assert np.array_equal(matmul(as_matrix([[1, 2], [3, 4]]), as_matrix([[5], [6]])), [[17], [39]])


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 1)))


def test_matmul_empty_inner_dimension():
    assert np.array_equal(matmul(np.ones((2, 0)), np.ones((0, 3))), np.zeros((2, 3)))


def test_matmul_matches_left_to_right_loop_bitwise():
    rng = np.random.default_rng(3)
    for _ in range(300):
        n, k, m = rng.integers(1, 40, size=3)
        a = rng.normal(size=(n, k))
        b = rng.normal(size=(k, m))
        assert matmul(a, b).tobytes() == _matmul_loop(a, b).tobytes()


def test_loop_reference_accumulates_left_to_right():
    a = as_matrix([[1e16, 1.0, -1e16]])
    b = as_matrix([[1.0], [1.0], [1.0]])
    # (1e16 + 1) rounds back to 1e16, so the ordered sum is 0, not 1
    assert _matmul_loop(a, b)[0, 0] == 0.0
    assert matmul(a, b)[0, 0] == 0.0


@given(st.integers(1, 6).flatmap(lambda n: st.tuples(st.just(n), st.integers(1, 6))).flatmap(lambda s: matrices(*s)))
def test_identity_is_exact(a):
    assert np.array_equal(matmul(np.eye(a.shape[0]), a), a)
    assert np.array_equal(matmul(a, np.eye(a.shape[1])), a)


def test_elementwise_examples():
    assert apply_sigmoid(as_matrix([[0]]))[0, 0] == 0.5
    assert apply_tanh(as_matrix([[0]]))[0, 0] == 0.0
    assert np.array_equal(hadamard(as_matrix([[2, 3]]), as_matrix([[4, 5]])), [[8, 15]])
    with pytest.raises(ShapeError):
        hadamard(np.ones((1, 2)), np.ones((2, 1)))


@given(arrays(np.float64, (3, 4), elements=st.floats(-30, 30)))
def test_sigmoid_in_open_unit_interval(a):
    s = apply_sigmoid(a)
    assert np.all((s > 0) & (s < 1))
    np.testing.assert_allclose(s, 1 / (1 + np.exp(-a)), rtol=1e-14, atol=0)


@given(arrays(np.float64, (3, 4), elements=st.floats(-18, 18)))
def test_tanh_in_open_interval(a):
    t = apply_tanh(a)
    assert np.all((t > -1) & (t < 1))


def test_sigmoid_is_stable_for_large_inputs():
    s = apply_sigmoid(as_matrix([[-1000.0, 1000.0]]))
    assert s[0, 0] == 0.0 and s[0, 1] == 1.0


def test_init_uniform_deterministic_and_in_range():
    a = init_uniform(2, 2, 0.3, SeededRng(42))
    b = init_uniform(2, 2, 0.3, SeededRng(42))
    assert a.tobytes() == b.tobytes()
    big = init_uniform(50, 50, 0.3, SeededRng(1))
    assert np.all(np.abs(big) <= 0.3)


def test_init_uniform_golden_values():
    # Philox4x64-10 seeded through SeedSequence(7); pinned from a reference run
    got = init_uniform(1, 4, 0.1, SeededRng(7))
    np.testing.assert_array_equal(got, GOLDEN_SEED7)


def test_init_uniform_rejects_non_positive_scale():
    with pytest.raises(ValueError):
        init_uniform(1, 1, 0.0, SeededRng(0))


def test_streams_are_independent_and_reproducible():
    a = SeededRng(5, "train", "Alice", 1).random(4)
    b = SeededRng(5, "train", "Bob", 1).random(4)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, SeededRng(5, "train", "Alice", 1).random(4))


@settings(max_examples=25)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32))
def test_operations_are_pure(r, c, seed):
    a = init_uniform(r, c, 1.0, SeededRng(seed))
    b = init_uniform(c, r, 1.0, SeededRng(seed + 1))
    assert matmul(a, b).tobytes() == matmul(a, b).tobytes()
    assert apply_sigmoid(a).tobytes() == apply_sigmoid(a.copy()).tobytes()
