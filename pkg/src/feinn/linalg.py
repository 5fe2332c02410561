"""Sparse matrix utilities and the linear solvers used by the rest of the
package: an exact SPD factorization (reused across training iterations) and
a conjugate-gradient normal-equations solver for the nonsymmetric
Petrov-Galerkin systems.

Matrices are stored in compressed sparse row form (``scipy.sparse.csr_matrix``);
the SPD factorization wraps SuperLU in symmetric mode with a fill-reducing
ordering, which on an SPD matrix yields ``L sqrt(D)`` as a Cholesky factor
and fails loudly on a non-positive pivot.
"""

from __future__ import annotations

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.linalg import splu


class NotSpdError(RuntimeError):
    pass


class SolverError(RuntimeError):
    def __init__(self, msg, residual=None, iterations=None):
        super().__init__(msg)
        self.residual = residual
        self.iterations = iterations


def spmv(A, x: np.ndarray, transpose: bool = False) -> np.ndarray:
    """``A @ x`` or ``A.T @ x`` with explicit dimension checks."""
    x = np.asarray(x, dtype=float)
    rows, cols = A.shape
    need = rows if transpose else cols
    if x.shape != (need,):
        raise ValueError(f"dimension mismatch: {A.shape} vs {x.shape}")
    return (A.T @ x) if transpose else (A @ x)


class SpdFactor:
    """Factorization of a symmetric positive definite sparse matrix."""

    def __init__(self, B):
        B = csr_matrix(B)
        if B.shape[0] != B.shape[1]:
            raise NotSpdError("matrix is not square")
        self.shape = B.shape
        try:
            self._lu = splu(
                B.tocsc(),
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
        except RuntimeError as exc:  # singular factorization
            raise NotSpdError(str(exc)) from exc
        d = self._lu.U.diagonal()
        if np.any(d <= 0.0):
            raise NotSpdError("non-positive pivot: matrix is not SPD")
        if not np.array_equal(self._lu.perm_r, self._lu.perm_c):
            raise NotSpdError("unsymmetric pivoting: matrix is not SPD")

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.shape[0]:
            raise ValueError("right-hand side length mismatch")
        return self._lu.solve(b)

    def chol(self):
        """Lower-triangular factor C with ``C C^T = B[p][:, p]``."""
        d = np.sqrt(self._lu.U.diagonal())
        return csr_matrix(self._lu.L.multiply(d[None, :]))

    @property
    def perm(self) -> np.ndarray:
        """Fill-reducing ordering p with ``chol() @ chol().T == B[p][:, p]``."""
        inv = np.empty_like(self._lu.perm_r)
        inv[self._lu.perm_r] = np.arange(len(inv))
        return inv


def spd_factor(B) -> SpdFactor:
    return SpdFactor(B)


def spd_solve(factor: SpdFactor, b: np.ndarray) -> np.ndarray:
    return factor.solve(b)


def lu_solve(A, b: np.ndarray) -> np.ndarray:
    """Direct sparse LU solve of a (possibly nonsymmetric) square system."""
    lu = splu(csr_matrix(A).tocsc())
    return lu.solve(np.asarray(b, dtype=float))


def cgnr_solve(A, b: np.ndarray, tol: float = 1e-12, maxit: int | None = None):
    """Least-squares solve of ``A x = b`` by conjugate gradients on the
    normal equations; stops when ``||A^T (A x - b)|| <= tol ||A^T b||``.

    Works for any operator supporting ``@`` and ``.T`` (sparse or dense).
    Raises :class:`SolverError` with the achieved residual when ``maxit``
    is exceeded.
    """
    b = np.asarray(b, dtype=float)
    n = A.shape[1]
    if maxit is None:
        maxit = max(20 * n, 200)
    x = np.zeros(n)
    r = b.copy()          # b - A x
    s = A.T @ r           # residual of the normal equations
    target = tol * np.linalg.norm(s)
    p = s.copy()
    gamma = float(s @ s)
    if gamma == 0.0:
        return x
    for it in range(maxit):
        q = A @ p
        qq = float(q @ q)
        if qq == 0.0:
            raise SolverError("rank-deficient system in cgnr", np.sqrt(gamma), it)
        alpha = gamma / qq
        x += alpha * p
        r -= alpha * q
        s = A.T @ r
        gamma_new = float(s @ s)
        if np.sqrt(gamma_new) <= target:
            return x
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
    raise SolverError(
        f"cgnr did not converge in {maxit} iterations "
        f"(normal residual {np.sqrt(gamma):.3e}, target {target:.3e})",
        residual=np.sqrt(gamma),
        iterations=maxit,
    )


def coo_sum_canonical(rows, cols, vals, shape):
    """Build a CSR matrix from triplets with order-independent summation.

    Triplets are sorted by (row, col, value) before reduction, so two
    assemblies that produce the same multiset of contributions in any order
    yield bitwise-identical matrices.
    """
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=float)
    if len(vals) == 0:
        return csr_matrix(shape)
    order = np.lexsort((vals, cols, rows))
    r, c, v = rows[order], cols[order], vals[order]
    new = np.empty(len(v), dtype=bool)
    new[0] = True
    new[1:] = (r[1:] != r[:-1]) | (c[1:] != c[:-1])
    starts = np.nonzero(new)[0]
    sums = np.add.reduceat(v, starts)
    return csr_matrix((sums, (r[starts], c[starts])), shape=shape)


def vector_sum_canonical(idx, vals, n):
    """Accumulate ``vals`` into a length-``n`` vector, order-independently."""
    idx = np.asarray(idx, dtype=np.int64)
    vals = np.asarray(vals, dtype=float)
    out = np.zeros(n)
    if len(vals) == 0:
        return out
    order = np.lexsort((vals, idx))
    i, v = idx[order], vals[order]
    new = np.empty(len(v), dtype=bool)
    new[0] = True
    new[1:] = i[1:] != i[:-1]
    starts = np.nonzero(new)[0]
    out[i[starts]] = np.add.reduceat(v, starts)
    return out
