import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.sparse import csr_matrix, diags, random as sparse_random

from feinn.linalg import (
    NotSpdError,
    SolverError,
    cgnr_solve,
    coo_sum_canonical,
    spd_factor,
    spd_solve,
    spmv,
    vector_sum_canonical,
)


def lap1d(n):
    return diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1]).tocsr()


def test_spmv_identity_and_diag():
    I = csr_matrix(np.eye(3))
    x = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(spmv(I, x), x)
    D = csr_matrix(np.diag([2.0, 3.0]))
    assert np.array_equal(spmv(D, np.ones(2)), [2.0, 3.0])
    assert np.array_equal(spmv(D, np.ones(2), transpose=True), [2.0, 3.0])


def test_spmv_matches_dense_oracle(rng):
    A = csr_matrix(rng.standard_normal((50, 50)) * (rng.random((50, 50)) < 0.2))
    x = rng.standard_normal(50)
    dense = A.toarray()
    assert np.allclose(spmv(A, x), dense @ x, atol=1e-13)
    assert np.allclose(spmv(A, x, transpose=True), dense.T @ x, atol=1e-13)


def test_spmv_dimension_mismatch():
    A = csr_matrix(np.ones((3, 2)))
    with pytest.raises(ValueError):
        spmv(A, np.ones(3))


def test_spd_factor_identity():
    F = spd_factor(csr_matrix(np.eye(4)))
    b = np.arange(4.0)
    assert np.allclose(spd_solve(F, b), b)


def test_spd_factor_tridiagonal_against_dense_oracle():
    B = lap1d(20)
    F = spd_factor(B)
    b = np.ones(20)
    x = spd_solve(F, b)
    assert np.allclose(x, np.linalg.solve(B.toarray(), b), atol=1e-10)


def test_spd_factor_reconstruction_invariant():
    B = lap1d(30)
    F = spd_factor(B)
    C = F.chol().toarray()
    p = F.perm
    Bp = B.toarray()[np.ix_(p, p)]
    assert np.linalg.norm(C @ C.T - Bp) <= 1e-10 * np.linalg.norm(Bp)


def test_spd_factor_rejects_indefinite():
    M = csr_matrix(np.array([[1.0, 2.0], [2.0, 1.0]]))  # eigenvalues 3, -1
    with pytest.raises(NotSpdError):
        spd_factor(M)


def test_spd_solve_residuals_random_rhs(rng):
    B = lap1d(64)
    F = spd_factor(B)
    for _ in range(20):
        b = rng.standard_normal(64)
        x = spd_solve(F, b)
        assert np.linalg.norm(B @ x - b) <= 1e-10 * np.linalg.norm(b)


def test_spd_factor_reuse_is_bit_identical(rng):
    B = lap1d(40)
    F = spd_factor(B)
    b = rng.standard_normal(40)
    assert np.array_equal(spd_solve(F, b), spd_solve(F, b))


def test_cgnr_identity():
    x = cgnr_solve(csr_matrix(np.eye(5)), np.arange(5.0))
    assert np.allclose(x, np.arange(5.0), atol=1e-12)


def test_cgnr_agrees_with_spd_solve():
    B = lap1d(30)
    b = np.sin(np.arange(30.0))
    x1 = cgnr_solve(B, b, tol=1e-14)
    x2 = spd_solve(spd_factor(B), b)
    assert np.allclose(x1, x2, atol=1e-8)


def test_cgnr_nonsymmetric_least_squares(rng):
    A = rng.standard_normal((40, 25))
    x_star = rng.standard_normal(25)
    b = A @ x_star
    x = cgnr_solve(A, b, tol=1e-13)
    assert np.allclose(x, x_star, atol=1e-8)


def test_cgnr_maxit_reports_residual():
    A = csr_matrix(np.diag(np.linspace(1, 1e6, 50)))
    with pytest.raises(SolverError) as err:
        cgnr_solve(A, np.ones(50), tol=1e-16, maxit=2)
    assert err.value.residual is not None
    assert err.value.iterations == 2


def test_coo_sum_canonical_order_independent(rng):
    rows = rng.integers(0, 10, 200)
    cols = rng.integers(0, 10, 200)
    vals = rng.standard_normal(200)
    A1 = coo_sum_canonical(rows, cols, vals, (10, 10))
    perm = rng.permutation(200)
    A2 = coo_sum_canonical(rows[perm], cols[perm], vals[perm], (10, 10))
    assert (A1 != A2).nnz == 0
    assert np.array_equal(A1.toarray(), A2.toarray())


def test_vector_sum_canonical(rng):
    idx = rng.integers(0, 7, 100)
    vals = rng.standard_normal(100)
    v1 = vector_sum_canonical(idx, vals, 7)
    perm = rng.permutation(100)
    v2 = vector_sum_canonical(idx[perm], vals[perm], 7)
    assert np.array_equal(v1, v2)
    assert np.allclose(v1, np.bincount(idx, vals, minlength=7), atol=1e-13)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 30), st.integers(0, 10**6))
def test_cgnr_random_spd_property(n, seed):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((n, n))
    A = M @ M.T + n * np.eye(n)
    b = rng.standard_normal(n)
    x = cgnr_solve(A, b, tol=1e-13)
    assert np.linalg.norm(A.T @ (A @ x - b)) <= 1e-10 * np.linalg.norm(A.T @ b)
