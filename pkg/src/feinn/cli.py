"""Command-line driver: parse a flat key=value config, run experiments, and
emit CSV reports, mesh exports and network checkpoints.

Modes: ``feinn_adaptive`` (adaptive training, one run per seed),
``fem_adaptive`` / ``fem_uniform`` (baselines), ``norm_study`` (one run per
preconditioner norm plus the unpreconditioned loss) and ``seed_study``
(per-seed runs plus an aggregate with nearest-rank percentile bands).

All defaults are the experiment protocol values: refine ratio 0.15,
coarsen ratio 0.01, 7 adaptation steps, architecture 2,50,50,50,50,1 with
tanh and Glorot initialization, and the per-problem iteration schedules.
"""

from __future__ import annotations

import argparse
import sys as _sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .adapt import AdaptConfig, adaptive_fem, adaptive_feinn, uniform_fem
from .mesh import write_mesh
from .neural import mlp_new, save_checkpoint
from .problems import REGISTRY, by_name
from .space import write_solution
from .training import LossConfig, NORMS

MODES = ("feinn_adaptive", "fem_adaptive", "fem_uniform", "norm_study", "seed_study")

ERROR_COLUMNS = ("feinn_l2", "feinn_h1", "nn_l2", "nn_h1")

AGGREGATE_HEADER = "step,leaves_median,dofs_median," + ",".join(
    f"{c}_{s}" for c in ERROR_COLUMNS for s in ("median", "p0", "p90")
)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    problem: str = "arc_wavefront"
    mode: str = "feinn_adaptive"
    indicator: str = "kelly"
    order: int = 4
    loss_mode: str = "discrete_l1"
    loss_norm: str = "W11"
    refine_ratio: float = 0.15
    coarsen_ratio: float = 0.01
    max_steps: int = 7
    arch: tuple = (2, 50, 50, 50, 50, 1)
    seeds: tuple = (0,)
    schedule_iters: tuple = ()        # empty: problem default
    schedule_milestones: tuple = ()   # paired with schedule_iters
    initial_levels: int = -1          # -1: problem default
    solution_samples: int = 0         # 0: no solution export
    memory: int = 300
    method: str = "lbfgs"
    out_dir: str = "results"

    _INT = ("order", "max_steps", "initial_levels", "solution_samples", "memory")
    _FLOAT = ("refine_ratio", "coarsen_ratio")
    _TUPLE = ("arch", "seeds", "schedule_iters", "schedule_milestones")

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        values = {}
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            values[key] = val
        return cls.from_values(values)

    @classmethod
    def from_values(cls, values: dict) -> "RunConfig":
        known = {f.name for f in fields(cls) if not f.name.startswith("_")}
        cfg = cls()
        for key, val in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            cfg = replace(cfg, **{key: cls._convert(key, val)})
        cfg.validate()
        return cfg

    @classmethod
    def _convert(cls, key: str, val):
        if not isinstance(val, str):
            return val
        try:
            if key in cls._INT:
                return int(val)
            if key in cls._FLOAT:
                return float(val)
            if key in cls._TUPLE:
                if not val.strip():
                    return ()
                return tuple(int(s.strip()) for s in val.split(","))
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {val!r}") from exc
        return val

    def validate(self):
        if self.problem not in REGISTRY:
            raise ConfigError(
                f"unknown problem {self.problem!r}; known: {sorted(REGISTRY)}"
            )
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; known: {MODES}")
        if self.indicator not in ("kelly", "network", "real"):
            raise ConfigError(f"unknown indicator {self.indicator!r}")
        if self.loss_mode not in ("discrete_l1", "preconditioned"):
            raise ConfigError(f"unknown loss_mode {self.loss_mode!r}")
        if self.loss_norm not in NORMS:
            raise ConfigError(f"unknown loss_norm {self.loss_norm!r}")
        if self.order < 1:
            raise ConfigError("order must be >= 1")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")
        if not (0 < self.refine_ratio < 1 and 0 < self.coarsen_ratio < 1
                and self.refine_ratio + self.coarsen_ratio < 1):
            raise ConfigError("need 0 < ratios and refine_ratio + coarsen_ratio < 1")
        if len(self.arch) < 2 or self.arch[0] != 2 or self.arch[-1] != 1:
            raise ConfigError("arch must run from 2 inputs to 1 output")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if bool(self.schedule_iters) and len(self.schedule_iters) != len(self.schedule_milestones) + 1:
            raise ConfigError("schedule_iters needs one more entry than schedule_milestones")
        if self.mode == "fem_adaptive" and self.indicator == "network":
            raise ConfigError("adaptive FEM supports the kelly and real indicators")

    def adapt_config(self, loss: LossConfig | None = None) -> AdaptConfig:
        return AdaptConfig(
            order=self.order,
            indicator=self.indicator,
            refine_ratio=self.refine_ratio,
            coarsen_ratio=self.coarsen_ratio,
            max_steps=self.max_steps,
            loss=loss if loss is not None else LossConfig(self.loss_mode, self.loss_norm),
            schedule_iters=self.schedule_iters or None,
            schedule_milestones=self.schedule_milestones or None,
            initial_levels=None if self.initial_levels < 0 else self.initial_levels,
            memory=self.memory,
            method=self.method,
        )


# -- outputs -----------------------------------------------------------------

def _write_trace(history, path):
    """Training trace: iter,loss,grad_norm per accepted step, cumulative
    across adaptation steps."""
    with open(path, "w") as fh:
        fh.write("iter,loss,grad_norm\n")
        it = 0
        for rep in history.reports:
            for f, gn in zip(rep.loss_trace[1:], rep.grad_trace[1:]):
                it += 1
                fh.write(f"{it},{float(f)!r},{float(gn)!r}\n")


def nearest_rank(values, p: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    v = np.sort(np.asarray(values, dtype=float))
    if p <= 0:
        return float(v[0])
    k = int(np.ceil(p / 100.0 * len(v)))
    return float(v[min(k, len(v)) - 1])


def write_aggregate(histories, path):
    """Per-step median and 0th/90th percentile of every error column."""
    n_steps = min(len(h.records) for h in histories)
    with open(path, "w") as fh:
        fh.write(AGGREGATE_HEADER + "\n")
        for s in range(n_steps):
            row = [
                str(s),
                repr(float(np.median([h.records[s].leaves for h in histories]))),
                repr(float(np.median([h.records[s].dofs for h in histories]))),
            ]
            for col in ERROR_COLUMNS:
                vals = [getattr(h.records[s], col) for h in histories]
                row.append(repr(float(np.median(vals))))
                row.append(repr(nearest_rank(vals, 0)))
                row.append(repr(nearest_rank(vals, 90)))
            fh.write(",".join(row) + "\n")


def _loglog_slope(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = (x > 0) & (y > 0) & np.isfinite(y)
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[keep]), np.log(y[keep]), 1)[0])


def report(histories):
    """Convergence tables with log-log regression slopes appended.

    Returns ``{"error_vs_step": rows, "error_vs_dof": rows, "slopes": ...}``
    where the rows carry per-step medians across the histories and slopes
    are fitted against the DOF counts; ``rate_vs_h = -2 * slope_vs_dofs``
    (DOF count scales like h^-2 in 2D).
    """
    if not histories:
        raise ValueError("need at least one history")
    n_steps = min(len(h.records) for h in histories)
    rows = []
    for s in range(n_steps):
        row = {
            "step": s,
            "dofs": float(np.median([h.records[s].dofs for h in histories])),
            "leaves": float(np.median([h.records[s].leaves for h in histories])),
        }
        for col in ERROR_COLUMNS:
            vals = [getattr(h.records[s], col) for h in histories]
            row[col] = float(np.median(vals))
            row[col + "_p0"] = nearest_rank(vals, 0)
            row[col + "_p90"] = nearest_rank(vals, 90)
        rows.append(row)
    dofs = [r["dofs"] for r in rows]
    slopes = {}
    for col in ERROR_COLUMNS:
        s_dof = _loglog_slope(dofs, [r[col] for r in rows])
        slopes[col] = {"vs_dofs": s_dof, "rate_vs_h": -2.0 * s_dof}
    return {
        "error_vs_step": rows,
        "error_vs_dof": [
            {k: r[k] for k in ("dofs", *ERROR_COLUMNS)} for r in rows
        ],
        "slopes": slopes,
    }


def write_report(tables, path):
    with open(path, "w") as fh:
        cols = list(tables["error_vs_step"][0].keys())
        fh.write(",".join(str(c) for c in cols) + "\n")
        for row in tables["error_vs_step"]:
            fh.write(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in cols) + "\n")
        fh.write("# slopes\n")
        for col, s in tables["slopes"].items():
            fh.write(f"# {col}: vs_dofs={s['vs_dofs']!r} rate_vs_h={s['rate_vs_h']!r}\n")


# -- run modes ----------------------------------------------------------------

def _run_feinn_once(problem, cfg: RunConfig, seed: int, out: Path, tag: str = "",
                    loss: LossConfig | None = None):
    suffix = f"{tag}_seed{seed}" if tag else f"seed{seed}"
    final = {}

    def step_cb(step, net, mesh, sys, total):
        write_mesh(mesh, out / f"mesh_step{step}_{suffix}.txt")
        final["net"], final["total"] = net, total

    net = mlp_new(cfg.arch, seed=seed)
    acfg = cfg.adapt_config(loss)
    net, mesh, history = adaptive_feinn(problem, net, acfg, step_callback=step_cb)
    history.write_csv(out / f"history_{suffix}.csv")
    _write_trace(history, out / f"trace_{suffix}.csv")
    save_checkpoint(net, out / f"net_{suffix}.ckpt")
    if cfg.solution_samples >= 2:
        write_solution(final["total"], out / f"solution_{suffix}.txt", cfg.solution_samples)
    return history


def run(cfg: RunConfig) -> int:
    """Execute one configuration; returns a process exit status."""
    problem = by_name(cfg.problem)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if cfg.mode == "fem_uniform":
        sols, history = uniform_fem(problem, cfg.adapt_config())
        history.write_csv(out / "history.csv")
        if cfg.solution_samples >= 2:
            write_solution(sols[-1], out / "solution.txt", cfg.solution_samples)
        write_report(report([history]), out / "report.csv")
        return 0

    if cfg.mode == "fem_adaptive":
        def fem_cb(step, total, mesh):
            write_mesh(mesh, out / f"mesh_step{step}.txt")

        sols, history = adaptive_fem(problem, cfg.adapt_config(), step_callback=fem_cb)
        history.write_csv(out / "history.csv")
        if cfg.solution_samples >= 2:
            write_solution(sols[-1], out / "solution.txt", cfg.solution_samples)
        write_report(report([history]), out / "report.csv")
        return 0

    if cfg.mode in ("feinn_adaptive", "seed_study"):
        histories = [
            _run_feinn_once(problem, cfg, seed, out) for seed in cfg.seeds
        ]
        if cfg.mode == "seed_study":
            write_aggregate(histories, out / "aggregate.csv")
        write_report(report(histories), out / "report.csv")
        return 0

    # norm_study: unpreconditioned plus every preconditioner norm
    variants = [("none", LossConfig("discrete_l1"))]
    variants += [(norm, LossConfig("preconditioned", norm)) for norm in NORMS]
    for seed in cfg.seeds:
        for tag, loss in variants:
            _run_feinn_once(problem, cfg, seed, out, tag=tag, loss=loss)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="feinn",
        description="Adaptive finite-element-interpolated network experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    runp = sub.add_parser("run", help="run a config file")
    runp.add_argument("config", help="path to a flat key = value config file")
    runp.add_argument("--out", help="output directory (overrides out_dir)")
    runp.add_argument("--seed", type=int, help="single seed (overrides seeds)")
    runp.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any config key",
    )
    args = parser.parse_args(argv)

    try:
        cfg = RunConfig.from_file(args.config)
        overrides = {}
        for item in args.override:
            if "=" not in item:
                raise ConfigError(f"--override needs KEY=VALUE, got {item!r}")
            key, val = item.split("=", 1)
            overrides[key.strip()] = val.strip()
        if args.out:
            overrides["out_dir"] = args.out
        if args.seed is not None:
            overrides["seeds"] = str(args.seed)
        if overrides:
            merged = {**_as_values(cfg), **overrides}
            cfg = RunConfig.from_values(merged)
    except ConfigError as exc:
        print(f"config error: {exc}", file=_sys.stderr)
        return 2
    return run(cfg)


def _as_values(cfg: RunConfig) -> dict:
    out = {}
    for f in fields(cfg):
        if f.name.startswith("_"):
            continue
        out[f.name] = getattr(cfg, f.name)
    return out


if __name__ == "__main__":
    raise SystemExit(main())
