"""Manufactured Poisson problems: exact solutions, gradients, source terms,
domains and per-problem defaults (initial refinement, architecture,
iteration schedule).

Source terms are never hand-derived: they come from second-order
forward-mode differentiation of the closed-form solution, so the identity
``-lap(u) = f`` holds to machine accuracy by construction. The L-shaped
problem is harmonic and gets ``f = 0`` exactly, with the gradient in closed
polar form.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .mesh import CoarseMesh, ForestMesh, new_forest, refine_uniform
from .neural import Taylor2, t2_atan2

L_SHAPE_CELLS = (
    (0.0, 0.0, 1.0, 1.0),
    (-1.0, 0.0, 1.0, 1.0),
    (0.0, -1.0, 1.0, 1.0),
)

DEFAULT_ARCH = (2, 50, 50, 50, 50, 1)


@dataclass(frozen=True)
class Problem:
    name: str
    coarse_cells: tuple
    u: Callable                 # exact solution, batched (n,2) -> (n,)
    grad_u: Callable            # (n,2) -> (n,2)
    f: Callable                 # source, (n,2) -> (n,)
    initial_levels: int
    arch: tuple = DEFAULT_ARCH
    schedule_iters: tuple = (500,)
    schedule_milestones: tuple = ()

    @property
    def g(self) -> Callable:
        """Dirichlet datum: the exact solution on the whole boundary."""
        return self.u

    def coarse_mesh(self) -> CoarseMesh:
        return CoarseMesh.from_cells(self.coarse_cells)

    def initial_mesh(self, levels: int | None = None) -> ForestMesh:
        lv = self.initial_levels if levels is None else levels
        return refine_uniform(new_forest(self.coarse_mesh()), lv)

    def sample_interior(self, n: int, seed: int = 0) -> np.ndarray:
        rng = np.random.default_rng(seed)
        cells = np.asarray(self.coarse_cells)
        pick = rng.integers(0, len(cells), size=n)
        t = rng.random((n, 2))
        return cells[pick, :2] + t * cells[pick, 2:]


def _from_taylor(expr: Callable):
    """Build batched (u, grad_u, f) callables from a Taylor2 expression."""

    def u(pts):
        x, y = Taylor2.seed(np.atleast_2d(pts))
        return expr(x, y).val

    def grad(pts):
        x, y = Taylor2.seed(np.atleast_2d(pts))
        e = expr(x, y)
        return np.column_stack([e.dx, e.dy])

    def f(pts):
        x, y = Taylor2.seed(np.atleast_2d(pts))
        e = expr(x, y)
        return -(e.dxx + e.dyy)

    return u, grad, f


def verify_consistency(problem: Problem, n: int = 100, seed: int = 17) -> float:
    """Max relative defect of ``-lap(u) = f`` at random interior points."""
    pts = problem.sample_interior(n, seed)
    x, y = Taylor2.seed(pts)
    e = _taylor_expr(problem)(x, y)
    lap = e.dxx + e.dyy
    fv = problem.f(pts)
    scale = max(1.0, float(np.abs(fv).max()))
    return float(np.abs(lap + fv).max()) / scale


_TAYLOR_EXPRS: dict = {}


def _taylor_expr(problem: Problem):
    return _TAYLOR_EXPRS[problem.name]


def _register(name, expr):
    _TAYLOR_EXPRS[name] = expr
    return expr


def arc_wavefront() -> Problem:
    """Sharp arc-shaped front on the unit square.

    ``u = arctan(100 (sqrt((x+0.05)^2 + (y+0.05)^2) - 0.7))``
    """

    def expr(x, y):
        r = ((x + 0.05) ** 2 + (y + 0.05) ** 2).sqrt()
        return (100.0 * (r - 0.7)).arctan()

    _register("arc_wavefront", expr)
    u, grad, f = _from_taylor(expr)
    return Problem(
        name="arc_wavefront",
        coarse_cells=((0.0, 0.0, 1.0, 1.0),),
        u=u,
        grad_u=grad,
        f=f,
        initial_levels=3,
        schedule_iters=(500, 1000, 1500),
        schedule_milestones=(5000, 10000),
    )


def fichera_lshape() -> Problem:
    """Corner singularity on the L-shaped domain [-1,1]^2 minus [-1,0]^2.

    ``u(r, theta) = r^(2/3) sin((2/3)(theta + pi/2))`` with
    ``theta = atan2(y, x)``, the unique branch for which the harmonic u
    vanishes on both reentrant edges. ``f = 0``; the gradient is given in
    closed polar form and is singular at the origin (never evaluated there).
    """

    def expr(x, y):
        theta = t2_atan2(y, x)
        r23 = (x**2 + y**2) ** (1.0 / 3.0)
        return r23 * ((2.0 / 3.0) * (theta + np.pi / 2)).sin()

    _register("fichera_lshape", expr)

    def u(pts):
        pts = np.atleast_2d(pts)
        x, y = pts[:, 0], pts[:, 1]
        r2 = x**2 + y**2
        out = np.zeros(len(pts))
        m = r2 > 0
        theta = np.arctan2(y[m], x[m])
        out[m] = r2[m] ** (1.0 / 3.0) * np.sin((2.0 / 3.0) * (theta + np.pi / 2))
        return out

    def grad(pts):
        pts = np.atleast_2d(pts)
        x, y = pts[:, 0], pts[:, 1]
        r2 = x**2 + y**2
        if np.any(r2 == 0):
            raise ValueError("gradient requested at the singular corner")
        theta = np.arctan2(y, x)
        a = (2.0 / 3.0) * (theta + np.pi / 2)
        rm13 = r2 ** (-1.0 / 6.0)  # r^(-1/3)
        c = (2.0 / 3.0) * rm13
        gx = c * (np.sin(a) * np.cos(theta) - np.cos(a) * np.sin(theta))
        gy = c * (np.sin(a) * np.sin(theta) + np.cos(a) * np.cos(theta))
        return np.column_stack([gx, gy])

    def f(pts):
        return np.zeros(len(np.atleast_2d(pts)))

    return Problem(
        name="fichera_lshape",
        coarse_cells=L_SHAPE_CELLS,
        u=u,
        grad_u=grad,
        f=f,
        initial_levels=4,
        schedule_iters=(3000, 4000, 5000),
        schedule_milestones=(10000, 20000),
    )


def poly_smoke(k: int, perturb: bool = False) -> Problem:
    """Tensor polynomial ``u = x^k + y^k`` on the unit square; with
    ``perturb`` a sine product is added so the solution leaves the FE space
    (for convergence-rate studies)."""
    if k < 1:
        raise ValueError("k must be >= 1")

    def expr(x, y):
        out = x**k + y**k
        if perturb:
            out = out + (np.pi * x).sin() * (np.pi * y).sin()
        return out

    name = f"poly_smoke_{k}" + ("_perturbed" if perturb else "")
    _register(name, expr)
    u, grad, f = _from_taylor(expr)
    return Problem(
        name=name,
        coarse_cells=((0.0, 0.0, 1.0, 1.0),),
        u=u,
        grad_u=grad,
        f=f,
        initial_levels=2,
    )


REGISTRY = {
    "arc_wavefront": arc_wavefront,
    "fichera_lshape": fichera_lshape,
    "poly_smoke_1": lambda: poly_smoke(1),
    "poly_smoke_2": lambda: poly_smoke(2),
    "poly_smoke_4": lambda: poly_smoke(4),
    "poly_smoke_2_perturbed": lambda: poly_smoke(2, perturb=True),
}


def by_name(name: str) -> Problem:
    if name not in REGISTRY:
        raise KeyError(f"unknown problem {name!r}; known: {sorted(REGISTRY)}")
    return REGISTRY[name]()


def tanh_hat_emulation(m: float, interval=(-1.0, 1.0)) -> Callable:
    """Two-neuron tanh bump: weights ``[m, -m]``, biases ``[m/4, m/4]``,
    output weights ``[m, m]`` with an outer tanh. Approaches value 1 at the
    interval midpoint and 0 at the endpoints as m grows; translated/scaled
    onto ``interval``."""
    if m <= 0:
        raise ValueError("m must be positive")
    a, b = float(interval[0]), float(interval[1])

    def f_m(x):
        x = np.asarray(x, dtype=float)
        t = (2.0 * x - (a + b)) / (b - a)
        inner = m * np.tanh(m * t + m / 4.0) + m * np.tanh(-m * t + m / 4.0)
        return np.tanh(inner)

    return f_m


def unit_hat(x):
    """Reference P1 hat on [-1, 1]: 1 at 0, 0 at the endpoints."""
    x = np.asarray(x, dtype=float)
    return np.maximum(0.0, 1.0 - np.abs(x))
