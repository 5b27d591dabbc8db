import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from conftest import dense_hadamard, dense_permutation, dense_rotation, singular_values_oracle
from lopro import SizeError, apply_block_rotation, exact_svd_small, fwht_normalized, gram_apply
from lopro.linalg import SVD_ORACLE_MAX_DIM, hadamard_matrix
from lopro.rotation import make_plan

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_fwht_two_point():
    np.testing.assert_allclose(fwht_normalized([1.0, 0.0]), [1 / math.sqrt(2)] * 2, atol=1e-15)


def test_fwht_length_one_is_identity():
    assert fwht_normalized([3.5]).tolist() == [3.5]


def test_fwht_ones_of_four():
    np.testing.assert_allclose(fwht_normalized([1.0, 1, 1, 1]), [2.0, 0, 0, 0], atol=1e-15)


@pytest.mark.parametrize("n", [3, 6, 12, 0])
def test_fwht_rejects_non_power_of_two(n):
    with pytest.raises(SizeError):
        fwht_normalized(np.ones(n))


def test_hadamard_matrix_matches_kronecker_oracle():
    for k in range(8):
        np.testing.assert_allclose(hadamard_matrix(2**k), dense_hadamard(2**k), atol=1e-15)


@pytest.mark.parametrize("k", range(0, 13))
def test_fwht_against_dense(k, rng):
    v = rng.standard_normal(2**k)
    np.testing.assert_allclose(fwht_normalized(v), dense_hadamard(2**k) @ v, rtol=0, atol=1e-10)


@given(st.integers(0, 14).flatmap(lambda k: hnp.arrays(np.float64, 2**k, elements=finite)))
def test_fwht_involution_and_norm(v):
    once = fwht_normalized(v)
    np.testing.assert_allclose(fwht_normalized(once), v, rtol=0, atol=1e-12 * max(1.0, np.abs(v).max()))
    nv = np.linalg.norm(v)
    assert abs(np.linalg.norm(once) - nv) <= 1e-10 * max(nv, 1e-300)


def test_block_rotation_identity_plan(rng):
    m = rng.standard_normal((5, 12))
    assert np.array_equal(apply_block_rotation(m, make_plan(12, None, 12, 4)), m)


def test_block_rotation_small_example():
    out = apply_block_rotation(np.ones((1, 4)), make_plan(4, None, 0, 4))
    np.testing.assert_allclose(out, [[2.0, 0, 0, 0]], atol=1e-15)


def test_block_rotation_round_trip(rng):
    m = rng.standard_normal((4, 8))
    plan = make_plan(8, rng.permutation(8), 0, 4)
    back = apply_block_rotation(apply_block_rotation(m, plan), plan, inverse=True)
    assert np.linalg.norm(back - m) <= 1e-10 * np.linalg.norm(m)


@given(
    st.sampled_from([(16, 0, 16), (16, 4, 4), (32, 8, 8), (8, 8, 1), (24, 8, 16), (12, 4, 2)]),
    st.integers(1, 6),
    st.integers(0, 2**31),
)
def test_block_rotation_matches_dense_oracle(geom, rows, seed):
    n, b_i, b_h = geom
    r = np.random.default_rng(seed)
    perm = r.permutation(n)
    m = r.standard_normal((rows, n))
    plan = make_plan(n, perm, b_i, b_h)
    pq = dense_permutation(perm) @ dense_rotation(n, b_i, b_h)
    fwd = apply_block_rotation(m, plan)
    np.testing.assert_allclose(fwd, m @ pq, atol=1e-12)
    np.testing.assert_allclose(apply_block_rotation(m, plan, inverse=True), m @ pq.T, atol=1e-12)
    assert abs(np.linalg.norm(fwd) - np.linalg.norm(m)) <= 1e-10 * np.linalg.norm(m)


def test_block_rotation_rejects_column_mismatch(rng):
    with pytest.raises(SizeError):
        apply_block_rotation(rng.standard_normal((2, 8)), make_plan(16, None, 0, 16))


def test_block_rotation_rowwise_is_sequential_equivalent(rng):
    # each row is transformed on its own; stacking rows must not change any bit
    m = rng.standard_normal((7, 32))
    plan = make_plan(32, rng.permutation(32), 8, 8)
    whole = apply_block_rotation(m, plan)
    rows = np.vstack([apply_block_rotation(m[i:i + 1], plan) for i in range(7)])
    assert np.array_equal(whole, rows)


def test_svd_diagonal():
    _, s, _ = exact_svd_small(np.diag([3.0, 1.0]))
    np.testing.assert_allclose(s, [3.0, 1.0], atol=1e-15)


def test_svd_zero_matrix():
    u, s, v = exact_svd_small(np.zeros((4, 3)))
    assert np.all(s == 0)
    np.testing.assert_allclose(u.T @ u, np.eye(3), atol=1e-10)
    np.testing.assert_allclose(v.T @ v, np.eye(3), atol=1e-10)


def test_svd_matches_eigensolver(rng):
    a = rng.standard_normal((8, 5))
    _, s, _ = exact_svd_small(a)
    np.testing.assert_allclose(s, singular_values_oracle(a), atol=1e-8)


@given(st.integers(1, 64), st.integers(1, 64), st.integers(0, 2**31))
def test_svd_properties(m, n, seed):
    a = np.random.default_rng(seed).standard_normal((m, n))
    u, s, v = exact_svd_small(a)
    k = min(m, n)
    assert u.shape == (m, k) and v.shape == (n, k)
    np.testing.assert_allclose(u.T @ u, np.eye(k), atol=1e-10)
    np.testing.assert_allclose(v.T @ v, np.eye(k), atol=1e-10)
    assert np.all(s >= 0) and np.all(np.diff(s) <= 0)
    assert np.linalg.norm(u * s @ v.T - a) <= 1e-9 * np.linalg.norm(a)


def test_svd_rank_deficient(rng):
    a = rng.standard_normal((10, 3)) @ rng.standard_normal((3, 7))
    u, s, v = exact_svd_small(a)
    np.testing.assert_allclose(u.T @ u, np.eye(7), atol=1e-10)
    assert np.all(s[3:] <= 1e-10 * s[0])
    assert np.linalg.norm(u * s @ v.T - a) <= 1e-9 * np.linalg.norm(a)


def test_svd_rejects_large():
    with pytest.raises(SizeError):
        exact_svd_small(np.zeros((SVD_ORACLE_MAX_DIM + 1, SVD_ORACLE_MAX_DIM + 1)))


def test_gram_power_zero_is_matvec(rng):
    a, v = rng.standard_normal((5, 3)), rng.standard_normal(3)
    assert np.array_equal(gram_apply(a, v, 0), a @ v)


def test_gram_identity(rng):
    v = rng.standard_normal(4)
    np.testing.assert_allclose(gram_apply(np.eye(4), v, 5), v, atol=0)


def test_gram_dense_oracle(rng):
    a, v = rng.standard_normal((6, 4)), rng.standard_normal(4)
    ref = np.linalg.matrix_power(a @ a.T, 2) @ a @ v
    np.testing.assert_allclose(gram_apply(a, v, 2), ref, rtol=1e-10)


@given(st.integers(1, 64), st.integers(1, 64), st.integers(0, 4), st.integers(0, 2**31))
def test_gram_property(m, n, p, seed):
    r = np.random.default_rng(seed)
    a, v = r.standard_normal((m, n)) / math.sqrt(max(m, n)), r.standard_normal(n)
    ref = np.linalg.matrix_power(a @ a.T, p) @ (a @ v)
    assert np.linalg.norm(gram_apply(a, v, p) - ref) <= 1e-10 * max(np.linalg.norm(ref), 1e-300)


def test_gram_rejects_length_mismatch(rng):
    with pytest.raises(SizeError):
        gram_apply(rng.standard_normal((3, 4)), np.ones(3), 1)
