"""Quadrature and assembly of the Poisson system on trial/test space pairs,
plus integral norms and error norms.

The bilinear form is the stiffness integral of the gradients; the test space
may equal the trial space (Galerkin) or be its linearized companion
(Petrov-Galerkin). Integration runs per test subcell with a tensor
Gauss-Legendre rule; hanging-node constraints are distributed onto master
DOFs on both sides and Dirichlet trial values are folded into the right-hand
side through the lifting.

Quadrature orders, per direction: assembly ``k+1``, function norms ``k+2``,
error norms ``k+3`` (exact or over-resolved for every polynomial integrand
that appears).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

from .linalg import SpdFactor, coo_sum_canonical, vector_sum_canonical
from .space import FEFunction, FESpace, eval_basis_grid


class AssemblyError(RuntimeError):
    pass


@dataclass(frozen=True)
class QuadRule:
    """Tensor Gauss-Legendre rule on the reference square [0,1]^2."""

    points: np.ndarray   # (q*q, 2)
    weights: np.ndarray  # (q*q,), sums to 1

    @property
    def n(self) -> int:
        return len(self.weights)


@lru_cache(maxsize=None)
def gauss_1d(q: int):
    """q-point Gauss-Legendre rule on [0,1]; exact to degree 2q-1."""
    x, w = np.polynomial.legendre.leggauss(q)
    return (x + 1.0) / 2.0, w / 2.0


@lru_cache(maxsize=None)
def quad_rule(q: int) -> QuadRule:
    x, w = gauss_1d(q)
    X, Y = np.meshgrid(x, x, indexing="ij")
    W = np.outer(w, w)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    return QuadRule(pts, W.ravel())


@lru_cache(maxsize=None)
def subcell_rule(q: int, subdiv: int):
    """Gauss rule replicated on every cell of the subdiv x subdiv grid.

    Points are in leaf coordinates; weights sum to 1.
    """
    base = quad_rule(q)
    pts = []
    for sy in range(subdiv):
        for sx in range(subdiv):
            shifted = (base.points + np.array([sx, sy])) / subdiv
            pts.append(shifted)
    points = np.concatenate(pts)
    weights = np.tile(base.weights / subdiv**2, subdiv * subdiv)
    return points, weights


@dataclass
class LinearSystem:
    """Assembled Poisson system: rows are free test DOFs, columns free trial
    DOFs; ``rhs`` carries the load minus the lifting's stiffness action."""

    A: object
    rhs: np.ndarray
    trial: FESpace
    test: FESpace
    lifting: Optional[FEFunction] = None
    B: object = None
    B_factor: Optional[SpdFactor] = None

    def with_gram(self) -> "LinearSystem":
        """Attach the test-space Gram matrix and its factorization."""
        if self.B_factor is None:
            self.B = assemble_gram(self.test)
            self.B_factor = SpdFactor(self.B)
        return self


def _integration_subdiv(trial: FESpace, test: FESpace) -> int:
    s = max(trial.subdiv, test.subdiv)
    for sp in (trial, test):
        if sp.subdiv not in (1, s):
            raise AssemblyError("incompatible subcell grids")
    if trial.mesh is not test.mesh:
        raise AssemblyError("trial and test spaces live on different meshes")
    return s


@lru_cache(maxsize=None)
def _ref_stiffness(o1, s1, o2, s2, q):
    """Reference stiffness tensors on the unit leaf.

    Returns ``(Kxx, Kyy)`` with ``K[i, j] = sum_q w ds(psi_i) ds(phi_j)``
    over the integration grid, test index ``i``, trial index ``j``.
    """
    s = max(s1, s2)
    pts, w = subcell_rule(q, s)
    _, t_dxi, t_deta = eval_basis_grid(o2, s2, pts)   # test
    _, u_dxi, u_deta = eval_basis_grid(o1, s1, pts)   # trial
    Kxx = np.einsum("q,qi,qj->ij", w, t_dxi, u_dxi)
    Kyy = np.einsum("q,qi,qj->ij", w, t_deta, u_deta)
    return Kxx, Kyy


def assemble_system(
    trial: FESpace,
    test: FESpace,
    f: Optional[Callable],
    lifting: Optional[FEFunction] = None,
) -> LinearSystem:
    """Assemble ``A[i,j] = integral of grad(phi_j) . grad(psi_i)`` and the
    right-hand side ``integral of f psi_i`` minus the stiffness action of the
    lifting. Deterministic: the triplet reduction is order-independent."""
    mesh = trial.mesh
    s = _integration_subdiv(trial, test)
    q = trial.order + 1
    Kxx, Kyy = _ref_stiffness(trial.order, trial.subdiv, test.order, test.subdiv, q)
    nt, nu = Kxx.shape

    # per-leaf element blocks depend only on the aspect ratio
    aspect = mesh.wx / mesh.wy
    E = (
        (1.0 / aspect)[:, None, None] * Kxx[None, :, :]
        + aspect[:, None, None] * Kyy[None, :, :]
    )

    # load vector and lifting action per leaf
    re = np.zeros((mesh.n_leaves, nt))
    if f is not None:
        pts_ref, w_ref = subcell_rule(q, s)
        tv, _, _ = eval_basis_grid(test.order, test.subdiv, pts_ref)
        xq = mesh.x0[:, None] + pts_ref[None, :, 0] * mesh.wx[:, None]
        yq = mesh.y0[:, None] + pts_ref[None, :, 1] * mesh.wy[:, None]
        fq = np.asarray(
            f(np.column_stack([xq.ravel(), yq.ravel()]))
        ).reshape(mesh.n_leaves, len(w_ref))
        jac = (mesh.wx * mesh.wy)[:, None]
        re += np.einsum("lq,q,qi->li", fq * jac, w_ref, tv)
    if lifting is not None:
        if lifting.space is not trial:
            raise AssemblyError("lifting must live on the trial space")
        lift_loc = lifting.node_values()[trial.leaf_nodes]
        re -= np.einsum("lij,lj->li", E, lift_loc)

    trial_ptr, trial_dof, trial_coef = trial.constraint_rows()
    test_ptr, test_dof, test_coef = test.constraint_rows()

    rows_n = np.repeat(test.leaf_nodes, nu, axis=1).ravel()
    cols_n = np.tile(trial.leaf_nodes, (1, nt)).ravel()
    vals = E.reshape(mesh.n_leaves, -1).ravel()
    r, c, v = _expand_pairs(
        rows_n, cols_n, vals, test_ptr, test_dof, test_coef, trial_ptr, trial_dof, trial_coef
    )
    A = coo_sum_canonical(r, c, v, (test.n_free, trial.n_free))

    rn = test.leaf_nodes.ravel()
    rv = re.ravel()
    ri, rvals = _expand_single(rn, rv, test_ptr, test_dof, test_coef)
    rhs = vector_sum_canonical(ri, rvals, test.n_free)

    return LinearSystem(A, rhs, trial, test, lifting)


def _expand_single(nodes, vals, ptr, dof, coef):
    cnt = ptr[nodes + 1] - ptr[nodes]
    rep_vals = np.repeat(vals, cnt)
    starts = ptr[nodes]
    # positions within each expansion run
    offs = _run_offsets(cnt)
    take = np.repeat(starts, cnt) + offs
    return dof[take], coef[take] * rep_vals


def _run_offsets(cnt):
    total = int(cnt.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    idx = np.arange(total, dtype=np.int64)
    run_start = np.repeat(np.cumsum(cnt) - cnt, cnt)
    return idx - run_start


def _expand_pairs(rows, cols, vals, rptr, rdof, rcoef, cptr, cdof, ccoef):
    """Expand node-indexed triplets through both constraint maps."""
    # first expand the row side
    r1, v1 = _expand_single(rows, vals, rptr, rdof, rcoef)
    cnt_r = rptr[rows + 1] - rptr[rows]
    c1 = np.repeat(cols, cnt_r)
    # then the column side
    c2, v2 = _expand_single(c1, v1, cptr, cdof, ccoef)
    cnt_c = cptr[c1 + 1] - cptr[c1]
    r2 = np.repeat(r1, cnt_c)
    return r2, c2, v2


def assemble_gram(test: FESpace):
    """Stiffness Gram matrix of the test space on its free DOFs (SPD)."""
    A = assemble_system(test, test, None, None).A
    # the elementwise kernel is symmetric; the canonical reduction makes the
    # assembled matrix bitwise symmetric as well
    return A


def _norm_rule(space: FESpace):
    q = space.order + 2
    return subcell_rule(q, space.subdiv)


def integrate_norm(f: FEFunction, which: str) -> float:
    """Integral norms of an FE function: ``L1 = int |f|``, ``L2 = sqrt(int f^2)``,
    ``W11 = int |grad f|``, ``W12 = sqrt(int |grad f|^2)``."""
    space = f.space
    mesh = space.mesh
    pts, w = _norm_rule(space)
    vals, grads = f.eval_at_ref(pts)
    jac = (mesh.wx * mesh.wy)[:, None]
    if which == "L1":
        return float(np.sum(jac * w[None, :] * np.abs(vals)))
    if which == "L2":
        return float(np.sqrt(np.sum(jac * w[None, :] * vals**2)))
    gmag2 = grads[..., 0] ** 2 + grads[..., 1] ** 2
    if which == "W11":
        return float(np.sum(jac * w[None, :] * np.sqrt(gmag2)))
    if which == "W12":
        return float(np.sqrt(np.sum(jac * w[None, :] * gmag2)))
    raise AssemblyError(f"unknown norm {which!r}")


def assemble_functional(
    space: FESpace,
    density: Optional[np.ndarray] = None,
    flux: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Vector ``w_i = int density psi_i + flux . grad(psi_i)`` over free DOFs.

    ``density (n_leaves, m)`` and ``flux (n_leaves, m, 2)`` are sampled on
    the same quadrature layout as :func:`integrate_norm` (``q = order+2``
    per subcell), so gradients of quadrature-defined norms are consistent
    with their values. Hanging contributions are distributed to masters.
    """
    mesh = space.mesh
    pts, w = _norm_rule(space)
    V, Dxi, Deta = space.basis_at(pts)
    jac = (mesh.wx * mesh.wy)[:, None]
    contrib = np.zeros((mesh.n_leaves, V.shape[1]))
    if density is not None:
        contrib += np.einsum("lq,q,qi->li", density * jac, w, V)
    if flux is not None:
        gx = flux[..., 0] * jac / mesh.wx[:, None]
        gy = flux[..., 1] * jac / mesh.wy[:, None]
        contrib += np.einsum("lq,q,qi->li", gx, w, Dxi)
        contrib += np.einsum("lq,q,qi->li", gy, w, Deta)
    ptr, dof, coef = space.constraint_rows()
    idx, vals = _expand_single(space.leaf_nodes.ravel(), contrib.ravel(), ptr, dof, coef)
    return vector_sum_canonical(idx, vals, space.n_free)


def norm_rule_layout(space: FESpace):
    """Quadrature layout used by :func:`integrate_norm` and
    :func:`assemble_functional`: reference points and weights."""
    return _norm_rule(space)


def error_norms(
    evaluate: Callable,
    mesh,
    u_exact: Callable,
    grad_exact: Callable,
    q: int,
):
    """``(e_L2, e_H1)`` of an identified solution against the exact one.

    ``evaluate(points, ref) -> (values, gradients)`` receives all physical
    quadrature points at once, leaf-major, together with the common per-leaf
    reference layout ``ref``. Gauss points never touch cell corners, so
    mildly singular exact gradients are safe.
    """
    pts_ref, w = subcell_rule(q, 1)
    xq = mesh.x0[:, None] + pts_ref[None, :, 0] * mesh.wx[:, None]
    yq = mesh.y0[:, None] + pts_ref[None, :, 1] * mesh.wy[:, None]
    pts = np.column_stack([xq.ravel(), yq.ravel()])
    vals, grads = evaluate(pts, pts_ref)
    vals = np.asarray(vals).reshape(mesh.n_leaves, -1)
    grads = np.asarray(grads).reshape(mesh.n_leaves, -1, 2)
    ue = np.asarray(u_exact(pts)).reshape(mesh.n_leaves, -1)
    ge = np.asarray(grad_exact(pts)).reshape(mesh.n_leaves, -1, 2)
    jac = (mesh.wx * mesh.wy)[:, None]
    dv2 = (vals - ue) ** 2
    dg2 = np.sum((grads - ge) ** 2, axis=-1)
    e_l2_sq = float(np.sum(jac * w[None, :] * dv2))
    e_h1_sq = e_l2_sq + float(np.sum(jac * w[None, :] * dg2))
    return np.sqrt(e_l2_sq), np.sqrt(e_h1_sq)


def fe_evaluator(f: FEFunction) -> Callable:
    """Adapter for :func:`error_norms` evaluating an FE function."""

    def evaluate(pts, ref):
        vals, grads = f.eval_at_ref(ref)
        return vals.ravel(), grads.reshape(-1, 2)

    return evaluate


def fefun_error_norms(f: FEFunction, u_exact, grad_exact, q: Optional[int] = None):
    if q is None:
        q = f.space.order + 3
    return error_norms(fe_evaluator(f), f.space.mesh, u_exact, grad_exact, q)


def write_matrix_coo(A, path) -> None:
    """Debug export in coordinate text format: one ``i j value`` per line."""
    coo = A.tocoo()
    with open(path, "w") as fh:
        fh.write(f"# {A.shape[0]} {A.shape[1]} {coo.nnz}\n")
        for i, j, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{i} {j} {float(v)!r}\n")
