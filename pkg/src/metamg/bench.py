"""Benchmark cases: iteration counts and wall times per (operator parameter, solver)."""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .discretization import PdeSpec
from .mgnet import CheckpointError, PdeMgNet, learned_solve, load_checkpoint
from .multigrid import Hierarchy, MgConfig, SolverDiverged, solve
from .smoothers import SmootherSpec
from .training import rhs_stream

log = logging.getLogger(__name__)

CLASSICAL_SOLVERS = ("gs", "jacobi", "line_gs", "krylov")
LEARNED_SOLVERS = ("pde_mgnet", "meta_sc", "meta_direct")
SOLVERS = CLASSICAL_SOLVERS + LEARNED_SOLVERS

CSV_COLUMNS = ("family", "eps", "theta", "n", "solver", "iters_mean", "iters_std",
               "time_mean", "time_std", "converged")
HISTORY_COLUMNS = ("family", "eps", "theta", "n", "solver", "rhs", "iteration", "residual")


def default_levels(n: int) -> int:
    """Five levels at N >= 256, four below, never coarser than a 3-node grid."""
    return max(2, min(5 if n >= 256 else 4, int(np.log2(n)) - 1))


def default_nu(levels: int) -> tuple:
    return (2,) + (1,) * (levels - 1)


def thread_count() -> int:
    """Worker cap from ``METAMG_THREADS`` (default 1)."""
    raw = os.environ.get("METAMG_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"METAMG_THREADS must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ValueError(f"METAMG_THREADS must be a positive integer, got {raw!r}")
    return value


@dataclass
class BenchCase:
    """``param_sets`` holds ``(eps, theta)`` pairs for aniso2d and ``(eps1, eps2)`` for aniso3d."""

    family: str = "aniso2d"
    param_sets: list = field(default_factory=lambda: [(1.0, 0.0)])
    n: int = 64
    solvers: tuple = ("gs",)
    rhs_count: int = 10
    seed: int = 0
    levels: int | None = None
    nu: tuple | None = None
    omega: float = 2.0 / 3.0
    tol: float = 1e-6
    max_iters: int = 10_000

    def __post_init__(self):
        self.solvers = tuple(self.solvers)
        self.param_sets = [tuple(float(v) for v in params) for params in self.param_sets]
        for name in self.solvers:
            if name not in SOLVERS:
                raise ValueError(f"unknown solver {name!r}; choose from {', '.join(SOLVERS)}")
        if self.rhs_count < 1:
            raise ValueError("need at least one right-hand side per parameter")
        if self.levels is None:
            self.levels = default_levels(self.n)
        if self.nu is None:
            self.nu = default_nu(self.levels)
        self.nu = tuple(int(v) for v in self.nu)
        for params in self.param_sets:
            self.spec(params)
        self.config("gs")

    def spec(self, params) -> PdeSpec:
        if self.family == "aniso3d":
            return PdeSpec("aniso3d", (1.0, params[0], params[1]), self.n)
        return PdeSpec(self.family, params, self.n)

    def config(self, solver: str) -> MgConfig:
        kind = solver if solver in CLASSICAL_SOLVERS else "gs"
        return MgConfig(levels=self.levels, nu=self.nu, tol=self.tol, max_iters=self.max_iters,
                        smoother=SmootherSpec(kind, omega=self.omega))


@dataclass
class BenchRow:
    family: str
    params: tuple
    n: int
    solver: str
    iterations: list
    times: list
    converged: bool
    histories: list = field(default_factory=list, repr=False)

    @property
    def iters_mean(self) -> float:
        return float(np.mean(self.iterations))

    @property
    def iters_std(self) -> float:
        return float(np.std(self.iterations))

    @property
    def time_mean(self) -> float:
        return float(np.mean(self.times))

    @property
    def time_std(self) -> float:
        return float(np.std(self.times))

    def csv_fields(self) -> list:
        eps, theta = self.params
        head = [self.family, f"{eps:.6g}", f"{theta:.6g}", str(self.n), self.solver]
        if not self.converged:
            # non-convergence is kept as a row with "-" statistics
            return head + ["-", "-", "-", "-", "false"]
        return head + [f"{self.iters_mean:.2f}", f"{self.iters_std:.2f}",
                       f"{self.time_mean:.6f}", f"{self.time_std:.6f}", "true"]


def load_models(checkpoints: dict, solvers) -> dict:
    """Learned models keyed by solver name. Missing files are skipped with a warning."""
    models = {}
    for name in solvers:
        if name in CLASSICAL_SOLVERS:
            continue
        path = checkpoints.get(name)
        if path is None or not os.path.exists(path):
            log.warning("no checkpoint for %s (%s); skipping it", name, path)
            continue
        models[name], _ = load_checkpoint(path)
    return models


def _run_one(hier: Hierarchy, f, solver: str, config: MgConfig, model):
    try:
        if model is None:
            _, report = solve(hier, f, config)
        else:
            _, report = learned_solve(model, hier, f, config)
    except SolverDiverged as err:
        return err.report
    return report


def run_row(case: BenchCase, param_index: int, solver: str, model=None) -> BenchRow:
    params = case.param_sets[param_index]
    spec = case.spec(params)
    config = case.config(solver)
    levels = model.levels if isinstance(model, PdeMgNet) else case.levels
    hier = Hierarchy.from_pde(spec, levels)
    iterations, times, histories, converged = [], [], [], True
    # untimed single iteration so JIT compilation stays out of the wall times
    _run_one(hier, rhs_stream(case.seed, param_index, 0).standard_normal((1,) + spec.extent), solver,
             dataclasses.replace(config, max_iters=1), model)
    for k in range(case.rhs_count):
        f = rhs_stream(case.seed, param_index, k).standard_normal((1,) + spec.extent)
        report = _run_one(hier, f, solver, config, model)
        iterations.append(report.iterations)
        times.append(report.wall_time)
        histories.append(report.history)
        converged = converged and report.converged
    return BenchRow(case.family, params, case.n, solver, iterations, times, converged, histories)


def run_case(case: BenchCase, models: dict | None = None, threads: int | None = None) -> list:
    """One row per (params, solver) in input order; learned solvers without a model are skipped."""
    models = models or {}
    jobs = [(i, s) for i in range(len(case.param_sets)) for s in case.solvers
            if s in CLASSICAL_SOLVERS or s in models]
    threads = thread_count() if threads is None else threads
    work = lambda job: run_row(case, job[0], job[1], models.get(job[1]))
    if threads == 1:
        return [work(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(work, jobs))


def write_csv(target, rows) -> None:
    """Write rows to a path or an open text stream."""
    if hasattr(target, "write"):
        writer = csv.writer(target, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow(row.csv_fields())
        return
    with open(target, "w", newline="") as fh:
        write_csv(fh, rows)


def write_histories(path, rows) -> None:
    """Long-format residual histories, one line per (row, rhs, iteration)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for row in rows:
            head = row.csv_fields()[:5]
            for k, history in enumerate(row.histories):
                for t, value in enumerate(history):
                    writer.writerow(head + [k, t, f"{value:.6e}"])


__all__ = ["BenchCase", "BenchRow", "CSV_COLUMNS", "SOLVERS", "CheckpointError", "default_levels",
           "default_nu", "load_models", "run_case", "run_row", "thread_count", "write_csv",
           "write_histories"]
