"""Loss functions on the assembled residual, their parameter gradients, and
the quasi-Newton optimizer.

Two loss modes: the plain l1 norm of the residual vector, and the
preconditioned mode that measures an integral norm (L1/L2/W11/W12) of the
discrete Riesz projection ``r_h`` obtained by solving the test-space Gram
system. Gradients flow through the chain residual -> DOF vector -> network
evaluation at the free nodes, ending in a vector-Jacobian product.

The optimizer is limited-memory BFGS (default memory 30) with a strong
Wolfe line search (c1=1e-4, c2=0.9); a failed search falls back to
backtracking steepest descent for that step and is counted in the report.
A dense-Hessian BFGS variant is available for small networks.
"""

from __future__ import annotations

import warnings
from bisect import bisect_right
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .assembly import LinearSystem, assemble_functional, integrate_norm, norm_rule_layout
from .linalg import SolverError, cgnr_solve
from .neural import Mlp, flatten, forward, hidden_outputs, unflatten, vjp
from .space import FEFunction, FESpace

NORMS = ("L1", "L2", "W11", "W12")
W11_EPS = 1e-12  # smoothing inside the W11 gradient only


@dataclass(frozen=True)
class LossConfig:
    mode: str = "discrete_l1"     # "discrete_l1" | "preconditioned"
    norm: str = "W11"             # used only in preconditioned mode

    def __post_init__(self):
        if self.mode not in ("discrete_l1", "preconditioned"):
            raise ValueError(f"unknown loss mode {self.mode!r}")
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}")


@dataclass
class TrainReport:
    iterations: int
    loss_trace: np.ndarray
    grad_trace: np.ndarray
    theta: np.ndarray
    ls_failures: int


def dof_vector(net: Mlp, trial: FESpace) -> np.ndarray:
    """Free-DOF vector of the interpolated network; Dirichlet entries come
    from the lifting, never from the network."""
    return forward(net, trial.free_xy)


def residual_vector(sys: LinearSystem, u: np.ndarray) -> np.ndarray:
    return sys.A @ u - sys.rhs


def discrete_loss_from_dofs(sys: LinearSystem, u: np.ndarray):
    """l1 loss and its gradient with respect to the DOF vector."""
    r = residual_vector(sys, u)
    value = float(np.abs(r).sum())
    grad_u = sys.A.T @ np.sign(r)
    return value, grad_u


def loss_discrete(net: Mlp, sys: LinearSystem):
    """``|| A u(theta) - rhs ||_l1`` and its theta-gradient."""
    u = dof_vector(net, sys.trial)
    value, grad_u = discrete_loss_from_dofs(sys, u)
    return value, vjp(net, sys.trial.free_xy, grad_u)


def riesz_projection(sys: LinearSystem, u: np.ndarray) -> np.ndarray:
    """DOF vector of ``r_h``: solve the Gram system for the residual."""
    if sys.B_factor is None:
        raise ValueError("LinearSystem has no Gram factorization; call with_gram()")
    return sys.B_factor.solve(residual_vector(sys, u))


def _norm_gradient_wrt_dofs(r_h: FEFunction, which: str, value: float) -> np.ndarray:
    """d ||r_h||_X / d(free DOFs of r_h), on the norm's own quadrature."""
    space = r_h.space
    pts, _ = norm_rule_layout(space)
    vals, grads = r_h.eval_at_ref(pts)
    if which == "L1":
        return assemble_functional(space, density=np.sign(vals))
    if which == "L2":
        if value == 0.0:
            return np.zeros(space.n_free)
        return assemble_functional(space, density=vals / value)
    if which == "W11":
        mag = np.sqrt(grads[..., 0] ** 2 + grads[..., 1] ** 2 + W11_EPS**2)
        return assemble_functional(space, flux=grads / mag[..., None])
    if which == "W12":
        if value == 0.0:
            return np.zeros(space.n_free)
        return assemble_functional(space, flux=grads / value)
    raise ValueError(f"unknown norm {which!r}")


def preconditioned_loss_from_dofs(sys: LinearSystem, u: np.ndarray, which: str):
    """Norm of the Riesz projection and its gradient with respect to u."""
    rvec = riesz_projection(sys, u)
    test = sys.test
    r_h = FEFunction(test, rvec, np.zeros(test.n_dirichlet))
    value = integrate_norm(r_h, which)
    w = _norm_gradient_wrt_dofs(r_h, which, value)
    grad_u = sys.A.T @ sys.B_factor.solve(w)  # B is symmetric
    return value, grad_u


def loss_preconditioned(net: Mlp, sys: LinearSystem, which: str):
    u = dof_vector(net, sys.trial)
    value, grad_u = preconditioned_loss_from_dofs(sys, u, which)
    return value, vjp(net, sys.trial.free_xy, grad_u)


def make_loss(sys: LinearSystem, config: LossConfig) -> Callable:
    """theta-space objective ``theta -> (value, grad)`` for the optimizer."""
    if config.mode == "preconditioned":
        sys.with_gram()

    def objective(net: Mlp):
        if config.mode == "discrete_l1":
            return loss_discrete(net, sys)
        return loss_preconditioned(net, sys, config.norm)

    return objective


# -- optimizer ------------------------------------------------------------------

def _cubic_step(a, fa, da, b, fb, db):
    """Minimizer of the cubic interpolant through two (alpha, f, f') pairs,
    or None when it is not usable."""
    h = b - a
    if h == 0:
        return None
    d1 = da + db - 3.0 * (fb - fa) / h
    disc = d1 * d1 - da * db
    if disc < 0:
        return None
    s = np.sqrt(disc) * np.sign(h)
    denom = db - da + 2.0 * s
    if denom == 0:
        return None
    t = b - h * (db + s - d1) / denom
    lo, hi = (a, b) if a < b else (b, a)
    span = hi - lo
    if not (lo + 0.05 * span <= t <= hi - 0.05 * span):
        return None
    return t


def _strong_wolfe(fg, x, f0, g0, d, c1=1e-4, c2=0.9, max_evals=30):
    """Line search for the strong Wolfe conditions, with a Hager-Zhang-style
    approximate-Wolfe fallback that rescues the frequent near-kink searches
    of l1-type losses.

    Returns ``(alpha, f, g, evals)`` or None when no acceptable step exists
    within the evaluation budget.
    """
    dphi0 = float(g0 @ d)
    if dphi0 >= 0:
        return None
    evals = 0
    feps = f0 + 1e-6 * abs(f0)

    def phi(alpha):
        nonlocal evals
        evals += 1
        f, g = fg(x + alpha * d)
        return f, g, float(g @ d)

    def acceptable(alpha, f_a, dphi_a):
        if f_a <= f0 + c1 * alpha * dphi0 and abs(dphi_a) <= -c2 * dphi0:
            return True
        # approximate Wolfe: derivative-based sufficient decrease
        return (
            f_a <= feps
            and (2.0 * c1 - 1.0) * dphi0 >= dphi_a >= c2 * dphi0
        )

    def zoom(lo, f_lo, dphi_lo, hi, f_hi, dphi_hi):
        while evals < max_evals:
            alpha = _cubic_step(lo, f_lo, dphi_lo, hi, f_hi, dphi_hi)
            if alpha is None:
                alpha = 0.5 * (lo + hi)
            f_a, g_a, dphi_a = phi(alpha)
            if acceptable(alpha, f_a, dphi_a):
                return alpha, f_a, g_a
            if f_a > f0 + c1 * alpha * dphi0 or f_a >= f_lo:
                hi, f_hi, dphi_hi = alpha, f_a, dphi_a
            else:
                if dphi_a * (hi - lo) >= 0:
                    hi, f_hi, dphi_hi = lo, f_lo, dphi_lo
                lo, f_lo, dphi_lo = alpha, f_a, dphi_a
            if abs(hi - lo) < 1e-16 * max(1.0, abs(lo)):
                return None
        return None

    alpha_prev, f_prev, dphi_prev = 0.0, f0, dphi0
    alpha = 1.0
    out = None
    for i in range(max_evals):
        f_a, g_a, dphi_a = phi(alpha)
        if acceptable(alpha, f_a, dphi_a) and f_a < f0:
            out = (alpha, f_a, g_a)
            break
        if f_a > f0 + c1 * alpha * dphi0 or (i > 0 and f_a >= f_prev):
            out = zoom(alpha_prev, f_prev, dphi_prev, alpha, f_a, dphi_a)
            break
        if dphi_a >= 0:
            out = zoom(alpha, f_a, dphi_a, alpha_prev, f_prev, dphi_prev)
            break
        alpha_prev, f_prev, dphi_prev = alpha, f_a, dphi_a
        alpha = min(2.0 * alpha, 1e6)
        if evals >= max_evals:
            break
    if out is None:
        return None
    alpha, f_a, g_a = out
    return alpha, f_a, g_a, evals


def _backtrack(fg, x, f0, d, dphi0, alpha=1.0, c1=1e-4, max_halvings=40):
    """Armijo backtracking along ``d``; returns ``(step, f, g)`` or None.

    Used when the curvature half of the strong Wolfe conditions cannot be
    met, which happens routinely on the kinks of l1-type losses.
    """
    if dphi0 >= 0:
        return None
    for _ in range(max_halvings):
        f_new, g_new = fg(x + alpha * d)
        if f_new < f0 + c1 * alpha * dphi0:
            return alpha * d, f_new, g_new
        alpha *= 0.5
    return None


def _two_loop(g, s_list, y_list, rho_list):
    q = g.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_list), reversed(y_list), reversed(rho_list)):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if s_list:
        s, y = s_list[-1], y_list[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(zip(s_list, y_list, rho_list), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def lbfgs_minimize(
    loss: Callable,
    theta0: np.ndarray,
    iters: int,
    memory: int = 30,
    gtol: float = 1e-12,
    method: str = "lbfgs",
    callback: Optional[Callable] = None,
) -> TrainReport:
    """Quasi-Newton minimization of ``loss(theta) -> (value, grad)``.

    Only decreasing steps are accepted, so the loss trace is
    non-increasing. ``method="bfgs"`` maintains the dense inverse Hessian
    (guarded to parameter counts below 2000).
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    theta = np.asarray(theta0, dtype=float).copy()
    n = len(theta)
    if method == "bfgs" and n >= 2000:
        raise ValueError("dense BFGS is limited to fewer than 2000 parameters")
    if method not in ("lbfgs", "bfgs"):
        raise ValueError(f"unknown method {method!r}")

    f, g = loss(theta)
    loss_trace = [f]
    grad_trace = [float(np.abs(g).max())]
    s_hist: list = []
    y_hist: list = []
    rho_hist: list = []
    H = np.eye(n) if method == "bfgs" else None
    failures = 0
    it = 0

    while it < iters:
        gnorm = float(np.abs(g).max())
        if gnorm < gtol:
            break
        first = not s_hist and method == "lbfgs" and it == 0
        if method == "bfgs":
            d = -(H @ g)
        else:
            d = -_two_loop(g, s_hist, y_hist, rho_hist)
        if float(d @ g) >= 0:
            d = -g
        if first:
            # conservative first step before any curvature information
            d = d / max(1.0, float(np.linalg.norm(d)))

        ls = _strong_wolfe(loss, theta, f, g, d)
        if ls is not None and ls[1] < f:
            alpha, f_new, g_new, _ = ls
            step = alpha * d
        else:
            # curvature unattainable near a kink: Armijo along d, then -g
            failures += 1
            bt = _backtrack(loss, theta, f, d, float(d @ g))
            if bt is None and float(d @ g) != float(-(g @ g)):
                gd = -g / max(1.0, float(np.linalg.norm(g)))
                bt = _backtrack(loss, theta, f, gd, float(gd @ g))
            if bt is None:
                break  # no descent along d or -g: stationary for this loss
            step, f_new, g_new = bt

        s = step
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-10 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            if method == "bfgs":
                if it == 0:
                    # standard first-update scaling of the initial Hessian
                    H *= sy / float(y @ y)
                # rank-2 form of (I - rho s y^T) H (I - rho y s^T) + rho s s^T
                # applied as one GEMM to touch H only once
                rho = 1.0 / sy
                hy = H @ y
                yhy = float(y @ hy)
                U = np.column_stack([s, hy])
                V2 = np.column_stack([(rho * rho * yhy + rho) * s - rho * hy, -rho * s])
                H += U @ V2.T
            else:
                s_hist.append(s)
                y_hist.append(y)
                rho_hist.append(1.0 / sy)
                if len(s_hist) > memory:
                    s_hist.pop(0)
                    y_hist.pop(0)
                    rho_hist.pop(0)

        theta = theta + step
        f, g = f_new, g_new
        it += 1
        loss_trace.append(f)
        grad_trace.append(float(np.abs(g).max()))
        if callback is not None:
            callback(it, theta, f, grad_trace[-1])

    return TrainReport(
        iterations=it,
        loss_trace=np.asarray(loss_trace),
        grad_trace=np.asarray(grad_trace),
        theta=theta,
        ls_failures=failures,
    )


def train(
    net: Mlp,
    sys: LinearSystem,
    config: LossConfig,
    iters: int,
    memory: int = 30,
    method: str = "lbfgs",
    callback: Optional[Callable] = None,
):
    """Minimize the configured loss over the network parameters."""
    objective = make_loss(sys, config)

    def as_theta(theta):
        return objective(unflatten(net, theta))

    report = lbfgs_minimize(
        as_theta, flatten(net), iters, memory=memory, method=method, callback=callback
    )
    return unflatten(net, report.theta), report


# -- last-layer linear solve ----------------------------------------------------

def last_layer_solve(net: Mlp, sys: LinearSystem) -> Mlp:
    """Optimal last-layer weights with the hidden layers frozen.

    Minimizes the l2 residual over the affine span of the last-layer
    functions; never increases the residual. Rank-deficient systems fall
    back to a ridge-regularized solve with a warning.
    """
    trial = sys.trial
    Z = hidden_outputs(net, trial.free_xy)
    Phi = np.column_stack([Z, np.ones(len(Z))])
    G = sys.A @ Phi
    w_old = np.concatenate([net.weights[-1].ravel(), net.biases[-1]])
    res_old = float(np.linalg.norm(G @ w_old - sys.rhs))
    try:
        w = cgnr_solve(G, sys.rhs, tol=1e-12)
    except SolverError:
        warnings.warn("rank-deficient last-layer system; using ridge 1e-10")
        M = G.T @ G + 1e-10 * np.eye(G.shape[1])
        w = np.linalg.solve(M, G.T @ sys.rhs)
    res_new = float(np.linalg.norm(G @ w - sys.rhs))
    if res_new > res_old:
        return net
    weights = list(net.weights)
    biases = list(net.biases)
    weights[-1] = w[:-1].reshape(1, -1).copy()
    biases[-1] = w[-1:].copy()
    return Mlp(tuple(weights), tuple(biases))


# -- iteration schedule ----------------------------------------------------------

def iteration_schedule(dofs: int, milestones: Sequence[int], iters_per_band: Sequence[int]) -> int:
    """Training-iteration band for the current DOF count; a DOF count equal
    to a milestone belongs to the higher band."""
    milestones = list(milestones)
    iters_per_band = list(iters_per_band)
    if sorted(milestones) != milestones or len(set(milestones)) != len(milestones):
        raise ValueError("milestones must be strictly increasing")
    if len(iters_per_band) != len(milestones) + 1:
        raise ValueError("need one more band than milestones")
    return int(iters_per_band[bisect_right(milestones, dofs)])


def scheduled_iters(
    dofs: int,
    milestones: Sequence[int],
    iters_per_band: Sequence[int],
    preconditioned: bool = False,
    final_step: bool = False,
) -> int:
    """Band value, reduced for preconditioned runs: bands divide by 4,
    except the final adaptation step which divides by 2."""
    base = iteration_schedule(dofs, milestones, iters_per_band)
    if not preconditioned:
        return base
    return max(1, base // (2 if final_step else 4))
