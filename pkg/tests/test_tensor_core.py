import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdplab.errors import NonFiniteError, ShapeError
from sdplab.tensor_core import Rng, argsort_by_key, as_matrix, frobenius_norm, matmul, seeded_normal


def naive_matmul(a, b):
    out = [[0.0] * len(b[0]) for _ in range(len(a))]
    for i in range(len(a)):
        for j in range(len(b[0])):
            for k in range(len(b)):
                out[i][j] += a[i][k] * b[k][j]
    return np.array(out)


def test_matmul_identity_and_forced_values():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(np.eye(2), a), a)
    np.testing.assert_array_equal(matmul(a, np.ones((2, 1))), [[3.0], [7.0]])


def test_matmul_matches_triple_loop():
    r = np.random.default_rng(0)
    a, b = r.normal(size=(5, 7)), r.normal(size=(7, 3))
    np.testing.assert_allclose(matmul(a, b), naive_matmul(a.tolist(), b.tolist()), atol=1e-12, rtol=0)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_matmul_associative(m, n, p, q, seed):
    r = np.random.default_rng(seed)
    a, b, c = r.normal(size=(m, n)), r.normal(size=(n, p)), r.normal(size=(p, q))
    left, right = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
    assert np.linalg.norm(left - right) <= 1e-9 * max(np.linalg.norm(left), 1e-300)


def test_frobenius_norm():
    assert frobenius_norm(np.zeros((3, 4))) == 0.0
    assert frobenius_norm([[3.0, 4.0]]) == 5.0
    a = np.random.default_rng(1).normal(size=(6, 9))
    oracle = sum(float(v) ** 2 for v in a.ravel()) ** 0.5
    assert abs(frobenius_norm(a) - oracle) <= 1e-12 * oracle
    assert abs(frobenius_norm(a) ** 2 - np.sum(a ** 2)) <= 1e-12 * np.sum(a ** 2)


def test_seeded_normal_constant_and_deterministic():
    np.testing.assert_array_equal(seeded_normal(Rng(3), 2, 3, mean=1.5, std=0.0), np.full((2, 3), 1.5))
    np.testing.assert_array_equal(seeded_normal(Rng(3), 4, 4), seeded_normal(Rng(3), 4, 4))
    with pytest.raises(ValueError):
        seeded_normal(Rng(3), 2, 2, std=-1.0)


def test_seeded_normal_moments():
    x = seeded_normal(Rng(11), 1000, 100, mean=2.0, std=3.0)
    assert abs(x.mean() - 2.0) < 0.02
    assert abs(x.std() - 3.0) < 0.02


def test_rng_children_are_independent_of_parent_consumption():
    a = Rng(5)
    a.normal(100)
    np.testing.assert_array_equal(a.child("x", 2).normal(5), Rng(5).child("x", 2).normal(5))
    assert not np.array_equal(Rng(5).child("x").normal(5), Rng(5).child("y").normal(5))


def test_argsort_by_key():
    np.testing.assert_array_equal(argsort_by_key([3, 1, 2]), [1, 2, 0])
    np.testing.assert_array_equal(argsort_by_key([5, 5, 5]), [0, 1, 2])
    vals = np.random.default_rng(2).integers(0, 10, size=100).astype(float)
    oracle = sorted(range(100), key=lambda i: (vals[i], i))
    np.testing.assert_array_equal(argsort_by_key(vals), oracle)
    with pytest.raises(NonFiniteError):
        argsort_by_key([1.0, np.nan])


def test_as_matrix_rejects_non_finite_and_bad_shapes():
    with pytest.raises(NonFiniteError):
        as_matrix([[1.0, np.inf]])
    with pytest.raises(ShapeError):
        as_matrix([1.0, 2.0])
    with pytest.raises(ShapeError):
        as_matrix([[1.0, 2.0]], rows=2)
