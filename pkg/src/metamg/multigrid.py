"""The \\-cycle, its smoother plumbing, and the outer residual-correction loop.

The cycle is written once against the ops interface of :mod:`metamg.autodiff`
and takes a smoother callback ``smooth(ops, level, step, r) -> e``; classical
and learned solvers differ only in that callback.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .autodiff import ArrayOps
from .discretization import LevelOperator, PdeSpec, assemble_matrix, build_levels, transfer_stencils
from .grid import ContractError, correlate, level_extents
from .smoothers import SmootherSpec, gs_apply, krylov_sc_apply, line_gs_apply


class SolverDiverged(FloatingPointError):
    """Relative residual blew past the divergence threshold."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class MgConfig:
    levels: int = 5
    nu: tuple = (2, 1, 1, 1, 1)
    smoother: SmootherSpec = field(default_factory=SmootherSpec)
    tol: float = 1e-6
    max_iters: int = 10_000
    divergence: float = 1e6

    def __post_init__(self):
        nu = tuple(int(v) for v in np.atleast_1d(self.nu))
        if len(nu) == self.levels - 1:
            nu = nu + (1,)
        object.__setattr__(self, "nu", nu)
        if self.levels < 2:
            raise ValueError("need at least two levels")
        if len(nu) != self.levels:
            raise ValueError(f"{len(nu)} smoothing counts given for {self.levels} levels")
        if any(v < 1 for v in nu[:-1]):
            raise ValueError("every level above the coarsest needs at least one smoothing step")
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


@dataclass
class SolveReport:
    iterations: int
    converged: bool
    history: list
    wall_time: float = 0.0

    def __str__(self):
        status = "converged" if self.converged else "not converged"
        return (f"{status} after {self.iterations} iterations, "
                f"relative residual {self.history[-1]:.3e}, {self.wall_time:.3f} s")


class Hierarchy:
    """Galerkin level operators for a batch of problems on a common mesh.

    ``operators[b][l]`` is level ``l`` (0 = finest) of sample ``b``. Per-level
    stencils are also stacked into ``coefs[l]`` of shape ``(batch, 1, 1, *taps)``
    for per-sample convolution. The coarsest level of each sample is factorized
    once with sparse LU.
    """

    def __init__(self, operators, n_cells, P=None, R=None, _lu=None):
        self.operators = [list(ops) for ops in operators]
        if not self.operators:
            raise ContractError("empty hierarchy")
        self.depth = len(self.operators[0])
        if any(len(ops) != self.depth for ops in self.operators):
            raise ContractError("samples disagree on the number of levels")
        self.ndim = self.operators[0][0].ndim
        self.n_cells = n_cells
        if P is None or R is None:
            P, R = transfer_stencils(self.ndim)
        self.P, self.R = P, R
        sizes = level_extents(n_cells, self.depth)
        self.extents = [(s,) * self.ndim for s in sizes]
        self.coefs = []
        for lvl in range(self.depth):
            taps = {ops[lvl].stencil.coef.shape for ops in self.operators}
            if len(taps) != 1:
                raise ContractError(f"level {lvl} stencils have differing shapes {taps}")
            self.coefs.append(np.stack([ops[lvl].stencil.coef for ops in self.operators]))
        if _lu is None:
            _lu = []
            for ops in self.operators:
                M = assemble_matrix(ops[-1], self.extents[-1]).tocsc()
                try:
                    _lu.append(spla.splu(M))
                except RuntimeError as err:
                    raise np.linalg.LinAlgError(f"coarsest-level factorization failed: {err}") from err
        self._lu = list(_lu)

    @classmethod
    def from_stencil(cls, stencil, n_cells, levels):
        A = stencil if isinstance(stencil, LevelOperator) else LevelOperator(stencil, 1)
        P, R = transfer_stencils(A.ndim)
        return cls([build_levels(A, levels, P, R)], n_cells, P, R)

    @classmethod
    def from_pde(cls, spec: PdeSpec, levels):
        return cls.from_stencil(spec.stencil(), spec.n, levels)

    @classmethod
    def stack(cls, hierarchies):
        """Concatenate single-problem hierarchies, reusing their factorizations."""
        first = hierarchies[0]
        ops = [o for h in hierarchies for o in h.operators]
        lu = [f for h in hierarchies for f in h._lu]
        return cls(ops, first.n_cells, first.P, first.R, _lu=lu)

    @property
    def batch(self) -> int:
        return len(self.operators)

    def fine_stencils(self):
        return [ops[0].stencil for ops in self.operators]

    def apply(self, u, level=0):
        return correlate(self.coefs[level], u, per_sample=True)

    def coarse_solve(self, r):
        out = np.empty_like(r)
        for b, lu in enumerate(self._lu):
            out[b] = lu.solve(r[b].ravel()).reshape(r.shape[1:])
        return out

    def coarse_solve_adjoint(self, g):
        out = np.empty_like(g)
        for b, lu in enumerate(self._lu):
            out[b] = lu.solve(g[b].ravel(), trans="T").reshape(g.shape[1:])
        return out


def slash_cycle(ops, hier: Hierarchy, f, nu, smooth):
    """One \\-cycle for right-hand side ``f`` of shape ``(batch, 1, *extent)``.

    Per level above the coarsest: ``nu[l]`` steps of ``u += smooth(r)``,
    ``r = f - A u``; the last residual is restricted. The coarsest level is
    solved exactly, then corrections are prolongated back up without
    post-smoothing.
    """
    depth = hier.depth
    if len(nu) < depth - 1:
        raise ContractError(f"{len(nu)} smoothing counts for {depth} levels")
    rhs = f
    corrections = []
    for lvl in range(depth - 1):
        coef = hier.coefs[lvl]
        u = None
        r = rhs
        for step in range(nu[lvl]):
            e = smooth(ops, lvl, step, r)
            u = e if u is None else ops.add(u, e)
            r = ops.sub(rhs, ops.conv(coef, u, per_sample=True))
        corrections.append(u)
        rhs = ops.restrict(hier.R, r)
    u = ops.linear_map(hier.coarse_solve, hier.coarse_solve_adjoint, rhs)
    for lvl in range(depth - 2, -1, -1):
        up = ops.prolong(hier.P, u)
        u = up if corrections[lvl] is None else ops.add(corrections[lvl], up)
    return u


def classical_smoother(spec: SmootherSpec, hier: Hierarchy):
    """Smoother callback for the non-learned kinds (array backend only)."""
    if spec.learned:
        raise ValueError(f"smoother {spec.kind!r} needs a trained model")
    if spec.kind == "jacobi":
        inv_diag = [np.array([ops[lvl].stencil.center() for ops in hier.operators])
                    for lvl in range(hier.depth)]
        if any(np.any(d == 0) for d in inv_diag):
            raise ZeroDivisionError("stencil has a zero center tap")
        scale = [spec.omega / d.reshape((-1,) + (1,) * (hier.ndim + 1)) for d in inv_diag]
        return lambda ops, lvl, step, r: r * scale[lvl]

    def per_sample(apply):
        def smooth(ops, lvl, step, r):
            out = np.empty_like(r)
            for b, level_ops in enumerate(hier.operators):
                out[b] = apply(level_ops[lvl].stencil, r[b])
            return out
        return smooth

    if spec.kind == "gs":
        return per_sample(gs_apply)
    if spec.kind == "line_gs":
        return per_sample(lambda K, r: line_gs_apply(K, r, spec.axis))
    return per_sample(lambda K, r: krylov_sc_apply(K, r, spec.depth))


def mg_cycle(f, hier: Hierarchy, config: MgConfig, smooth=None):
    """Apply one classical \\-cycle to ``f`` (a field or a batch of fields)."""
    f = np.asarray(f, dtype=np.float64)
    single = f.ndim == hier.ndim + 1
    fb = f[None] if single else f
    smooth = smooth or classical_smoother(config.smoother, hier)
    u = slash_cycle(ArrayOps(), hier, fb, config.nu, smooth)
    return u[0] if single else u


def iterate(hier: Hierarchy, f, cycle, tol=1e-6, max_iters=10_000, divergence=1e6,
            callback=None):
    """``u <- u + cycle(f - A u)`` from ``u = 0`` until the relative residual drops below ``tol``.

    ``f`` is a single field ``(1, *extent)``; ``cycle`` maps a batched residual
    to a batched correction. ``callback(t, u)`` is called after every update.
    """
    f = np.asarray(f, dtype=np.float64)
    if hier.batch != 1:
        raise ContractError("the outer iteration runs one problem at a time")
    fb = f[None]
    u = np.zeros_like(fb)
    fnorm = np.linalg.norm(f)
    start = time.perf_counter()
    if fnorm == 0:
        return u[0], SolveReport(0, True, [0.0], time.perf_counter() - start)
    history = [1.0]
    r = fb
    converged = False
    for t in range(1, max_iters + 1):
        u = u + cycle(r)
        r = fb - hier.apply(u)
        rel = float(np.linalg.norm(r) / fnorm)
        history.append(rel)
        if callback is not None:
            callback(t, u[0])
        if not np.isfinite(rel) or rel > divergence:
            report = SolveReport(t, False, history, time.perf_counter() - start)
            raise SolverDiverged(f"relative residual {rel:.3e} after {t} iterations", report)
        if rel < tol:
            converged = True
            break
    report = SolveReport(len(history) - 1, converged, history, time.perf_counter() - start)
    return u[0], report


def _hierarchy(levels, n_cells=None, depth=None):
    if isinstance(levels, Hierarchy):
        return levels
    if isinstance(levels, PdeSpec):
        return Hierarchy.from_pde(levels, depth)
    levels = list(levels)
    if n_cells is None:
        raise ContractError("mesh size needed to build a hierarchy from level operators")
    return Hierarchy([levels], n_cells)


def solve(levels, f, config: MgConfig = MgConfig(), smooth=None, callback=None):
    """Solve ``A u = f`` with the classical \\-cycle iteration.

    ``levels`` is a :class:`Hierarchy` or a :class:`PdeSpec`. Returns the
    solution field and a :class:`SolveReport`.
    """
    hier = _hierarchy(levels, depth=config.levels)
    if hier.depth != config.levels:
        raise ContractError(f"hierarchy has {hier.depth} levels, config expects {config.levels}")
    smooth = smooth or classical_smoother(config.smoother, hier)
    ops = ArrayOps()
    return iterate(hier, f, lambda r: slash_cycle(ops, hier, r, config.nu, smooth),
                   config.tol, config.max_iters, config.divergence, callback)


def energy_error(A_matrix, u_exact, u):
    """``||u_exact - u||_A`` for flattened fields."""
    e = np.ravel(u_exact) - np.ravel(u)
    return float(np.sqrt(max(e @ (A_matrix @ e), 0.0)))
