"""A posteriori error indicators, fixed-fraction marking, and the adaptive
train/estimate/mark/adapt loop, together with the h-adaptive and uniform
FEM baselines.

Marking is fixed-fraction: the top ``ceil(refine_ratio * n)`` leaves by
indicator are refined and the bottom ``ceil(coarsen_ratio * n)`` coarsened
(refinement wins on overlap), with a deterministic tie-break on leaf index.
The network parameters are carried across adaptation steps (warm start).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .assembly import (
    assemble_system,
    error_norms,
    fefun_error_norms,
    gauss_1d,
    quad_rule,
)
from .linalg import cgnr_solve, spd_factor, spd_solve
from .mesh import ForestMesh, adapt as mesh_adapt
from .neural import Mlp, forward, forward_grad, spatial_derivs
from .problems import Problem
from .space import (
    FEFunction,
    FESpace,
    build_fe_space,
    build_test_space,
    eval_fe,
    lift_dirichlet,
)
from .training import (
    LossConfig,
    TrainReport,
    dof_vector,
    scheduled_iters,
    train,
)

INDICATORS = ("kelly", "network", "real")


@dataclass(frozen=True)
class AdaptConfig:
    order: int = 4
    indicator: str = "kelly"
    refine_ratio: float = 0.15
    coarsen_ratio: float = 0.01
    max_steps: int = 7
    loss: LossConfig = field(default_factory=LossConfig)
    schedule_iters: Optional[tuple] = None       # None: problem default
    schedule_milestones: Optional[tuple] = None
    initial_levels: Optional[int] = None
    # deep curvature memory approximates the dense-BFGS behavior the
    # unpreconditioned loss needs; cheap at desk scale
    memory: int = 300
    method: str = "lbfgs"

    def __post_init__(self):
        if not (0 < self.refine_ratio < 1 and 0 < self.coarsen_ratio < 1):
            raise ValueError("ratios must lie in (0, 1)")
        if self.refine_ratio + self.coarsen_ratio >= 1:
            raise ValueError("refine_ratio + coarsen_ratio must be < 1")
        if self.indicator not in INDICATORS:
            raise ValueError(f"unknown indicator {self.indicator!r}")


@dataclass
class StepRecord:
    step: int
    leaves: int
    dofs: int
    iters: int
    loss: float
    feinn_l2: float
    feinn_h1: float
    nn_l2: float = float("nan")
    nn_h1: float = float("nan")


HISTORY_HEADER = "step,leaves,dofs,iters,loss,feinn_l2,feinn_h1,nn_l2,nn_h1"


@dataclass
class AdaptHistory:
    records: list = field(default_factory=list)
    reports: list = field(default_factory=list)

    def add(self, rec: StepRecord):
        self.records.append(rec)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write(HISTORY_HEADER + "\n")
            for r in self.records:
                fh.write(
                    f"{r.step},{r.leaves},{r.dofs},{r.iters},{float(r.loss)!r},"
                    f"{float(r.feinn_l2)!r},{float(r.feinn_h1)!r},"
                    f"{float(r.nn_l2)!r},{float(r.nn_h1)!r}\n"
                )


# -- error indicators -----------------------------------------------------------

def kelly_indicator(total: FEFunction) -> np.ndarray:
    """Per-leaf gradient-jump indicator with scale ``h_K / 24``.

    Each cell integrates the squared normal-derivative jump over its own
    interior faces; across hanging faces the integration runs over the
    fine-side subfaces against the coarse neighbor's polynomial trace.
    """
    space = total.space
    mesh = space.mesh
    k = space.order
    t, w = gauss_1d(k + 1)
    zeta2 = np.zeros(mesh.n_leaves)
    for i, leaf in enumerate(mesh.leaves):
        acc = 0.0
        for fn in mesh.face_neighbors(leaf):
            if fn.kind == "boundary":
                continue
            if fn.kind == "finer":
                pairs = [(nb, _leaf_face_segment(mesh, nb, fn)) for nb in fn.neighbors]
            else:
                pairs = [(fn.neighbors[0], fn.segment)]
            for other, ((ax, ay), (bx, by)) in pairs:
                pts = np.column_stack(
                    [ax + t * (bx - ax), ay + t * (by - ay)]
                )
                normal = np.array([by - ay, -(bx - ax)])
                normal /= np.linalg.norm(normal)
                _, ga = eval_fe(total, leaf, pts)
                _, gb = eval_fe(total, other, pts)
                jump = (ga - gb) @ normal
                length = math.hypot(bx - ax, by - ay)
                acc += float(np.sum(w * jump**2)) * length
        zeta2[i] = (mesh.h[i] / 24.0) * acc
    return np.sqrt(zeta2)


def _leaf_face_segment(mesh, nb, fn):
    """Sub-segment of a hanging face owned by the finer neighbor ``nb``."""
    (ax, ay), (bx, by) = fn.segment
    j = mesh.index[nb]
    x0, y0 = mesh.x0[j], mesh.y0[j]
    x1, y1 = x0 + mesh.wx[j], y0 + mesh.wy[j]
    # clip the face segment to the neighbor's box
    if ax == bx:  # vertical face
        lo, hi = max(min(ay, by), y0), min(max(ay, by), y1)
        return ((ax, lo), (bx, hi))
    lo, hi = max(min(ax, bx), x0), min(max(ax, bx), x1)
    return ((lo, ay), (hi, by))


def network_indicator(net: Mlp, mesh: ForestMesh, f: Callable, q: int = 8) -> np.ndarray:
    """Per-leaf L2 norm of the strong residual ``lap(u_N) + f`` of the raw
    network, tensor Gauss quadrature with ``q`` points per direction."""
    rule = quad_rule(q)
    xq = mesh.x0[:, None] + rule.points[None, :, 0] * mesh.wx[:, None]
    yq = mesh.y0[:, None] + rule.points[None, :, 1] * mesh.wy[:, None]
    pts = np.column_stack([xq.ravel(), yq.ravel()])
    _, _, lap = spatial_derivs(net, pts)
    resid = (lap + np.asarray(f(pts))).reshape(mesh.n_leaves, -1)
    jac = mesh.wx * mesh.wy
    return np.sqrt(jac * np.sum(rule.weights[None, :] * resid**2, axis=1))


def real_indicator(total: FEFunction, u_exact: Callable) -> np.ndarray:
    """Per-leaf L2 distance of the identified solution to the exact one."""
    space = total.space
    mesh = space.mesh
    rule = quad_rule(space.order + 3)
    vals, _ = total.eval_at_ref(rule.points)
    xq = mesh.x0[:, None] + rule.points[None, :, 0] * mesh.wx[:, None]
    yq = mesh.y0[:, None] + rule.points[None, :, 1] * mesh.wy[:, None]
    ue = np.asarray(u_exact(np.column_stack([xq.ravel(), yq.ravel()])))
    diff2 = (vals - ue.reshape(mesh.n_leaves, -1)) ** 2
    jac = mesh.wx * mesh.wy
    return np.sqrt(jac * np.sum(rule.weights[None, :] * diff2, axis=1))


def mark(zeta: np.ndarray, refine_ratio: float, coarsen_ratio: float, mesh: ForestMesh):
    """Fixed-fraction marking with deterministic index tie-break.

    ``|refine| = ceil(refine_ratio n)`` exactly; the coarsen set drops any
    overlap with the refine set.
    """
    zeta = np.asarray(zeta, dtype=float)
    n = len(zeta)
    if n != mesh.n_leaves or n == 0:
        raise ValueError("indicator length must match the leaf count")
    if not np.all(np.isfinite(zeta)) or np.any(zeta < 0):
        raise ValueError("indicator values must be finite and nonnegative")
    order = np.lexsort((np.arange(n), -zeta))
    n_ref = math.ceil(refine_ratio * n)
    n_coa = math.ceil(coarsen_ratio * n)
    refine = {mesh.leaves[i] for i in order[:n_ref]}
    coarsen = {mesh.leaves[i] for i in order[n - n_coa:]} - refine
    assert len(refine) == n_ref
    return refine, coarsen


# -- FEM solves -------------------------------------------------------------------

def build_system(problem: Problem, mesh: ForestMesh, k: int, petrov: bool = True):
    trial = build_fe_space(mesh, k)
    test = build_test_space(trial) if petrov else trial
    lifting = lift_dirichlet(trial, problem.g)
    sys = assemble_system(trial, test, problem.f, lifting)
    return sys


def fem_solve(problem: Problem, mesh: ForestMesh, k: int, petrov: bool = False,
              tol: float = 1e-12) -> FEFunction:
    """Direct FE solution: Galerkin (SPD factorization) or Petrov-Galerkin
    (conjugate gradients on the normal equations)."""
    sys = build_system(problem, mesh, k, petrov=petrov)
    if petrov and sys.trial.order > 1:
        c = cgnr_solve(sys.A, sys.rhs, tol=tol)
    else:
        c = spd_solve(spd_factor(sys.A), sys.rhs)
    return FEFunction(sys.trial, c, sys.lifting.dirichlet)


def _fe_errors(total: FEFunction, problem: Problem):
    return fefun_error_norms(total, problem.u, problem.grad_u)


def _nn_errors(net: Mlp, mesh: ForestMesh, problem: Problem, k: int):
    def evaluate(pts, ref):
        v, g = forward_grad(net, pts)
        return v, g

    return error_norms(evaluate, mesh, problem.u, problem.grad_u, q=k + 3)


def interpolated_total(net: Mlp, sys) -> FEFunction:
    """pi_h(u_N) plus the Dirichlet lifting, as one FE function."""
    return FEFunction(sys.trial, dof_vector(net, sys.trial), sys.lifting.dirichlet)


def _indicator_field(name, net, total, sys, problem):
    if name == "kelly":
        return kelly_indicator(total)
    if name == "network":
        return network_indicator(net, sys.trial.mesh, problem.f)
    return real_indicator(total, problem.u)


def adaptive_feinn(
    problem: Problem,
    net: Mlp,
    config: AdaptConfig,
    step_callback: Optional[Callable] = None,
):
    """Adaptive training loop; returns ``(net, final mesh, history)``.

    Each pass trains on the current mesh (iteration budget from the DOF
    schedule), records errors, and unless the step budget is exhausted
    estimates, marks and adapts, carrying the parameters over.
    """
    mesh = problem.initial_mesh(config.initial_levels)
    iters_bands = config.schedule_iters or problem.schedule_iters
    milestones = (
        config.schedule_milestones
        if config.schedule_milestones is not None
        else problem.schedule_milestones
    )
    precond = config.loss.mode == "preconditioned"
    history = AdaptHistory()

    for step in range(config.max_steps + 1):
        sys = build_system(problem, mesh, config.order, petrov=True)
        iters = scheduled_iters(
            sys.trial.n_free,
            milestones,
            iters_bands,
            preconditioned=precond,
            final_step=(step == config.max_steps),
        )
        net, report = train(
            net, sys, config.loss, iters, memory=config.memory, method=config.method
        )
        total = interpolated_total(net, sys)
        fe_l2, fe_h1 = _fe_errors(total, problem)
        nn_l2, nn_h1 = _nn_errors(net, mesh, problem, config.order)
        history.add(
            StepRecord(
                step,
                mesh.n_leaves,
                sys.trial.n_free,
                report.iterations,
                float(report.loss_trace[-1]),
                fe_l2,
                fe_h1,
                nn_l2,
                nn_h1,
            )
        )
        history.reports.append(report)
        if step_callback is not None:
            step_callback(step, net, mesh, sys, total)
        if step == config.max_steps:
            break
        zeta = _indicator_field(config.indicator, net, total, sys, problem)
        refine, coarsen = mark(zeta, config.refine_ratio, config.coarsen_ratio, mesh)
        mesh = mesh_adapt(mesh, refine, coarsen)

    return net, mesh, history


def adaptive_fem(
    problem: Problem,
    config: AdaptConfig,
    petrov: bool = False,
    step_callback: Optional[Callable] = None,
):
    """Same loop with the training stage replaced by a direct FE solve."""
    if config.indicator not in ("kelly", "real"):
        raise ValueError("adaptive FEM supports the kelly and real indicators")
    mesh = problem.initial_mesh(config.initial_levels)
    history = AdaptHistory()
    solutions = []
    for step in range(config.max_steps + 1):
        total = fem_solve(problem, mesh, config.order, petrov=petrov)
        solutions.append(total)
        fe_l2, fe_h1 = _fe_errors(total, problem)
        history.add(
            StepRecord(
                step, mesh.n_leaves, total.space.n_free, 0, float("nan"), fe_l2, fe_h1
            )
        )
        if step_callback is not None:
            step_callback(step, total, mesh)
        if step == config.max_steps:
            break
        if config.indicator == "kelly":
            zeta = kelly_indicator(total)
        else:
            zeta = real_indicator(total, problem.u)
        refine, coarsen = mark(zeta, config.refine_ratio, config.coarsen_ratio, mesh)
        mesh = mesh_adapt(mesh, refine, coarsen)
    return solutions, history


def uniform_fem(problem: Problem, config: AdaptConfig):
    """Galerkin FEM on a sequence of uniformly refined meshes."""
    from .mesh import refine_uniform

    mesh = problem.initial_mesh(config.initial_levels)
    history = AdaptHistory()
    solutions = []
    for step in range(config.max_steps + 1):
        total = fem_solve(problem, mesh, config.order)
        solutions.append(total)
        fe_l2, fe_h1 = _fe_errors(total, problem)
        history.add(
            StepRecord(
                step, mesh.n_leaves, total.space.n_free, 0, float("nan"), fe_l2, fe_h1
            )
        )
        if step == config.max_steps:
            break
        mesh = refine_uniform(mesh, 1)
    return solutions, history
