"""Stencils for the model problems, grid transfers and Galerkin coarsening."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .grid import ContractError, StencilKernel, correlate, prolong, restrict


_FDM = {
    # (taps, power of h)
    "dx_b": ([[-1.0, 1.0, 0.0]], 1),
    "dx_f": ([[0.0, -1.0, 1.0]], 1),
    "dy_b": ([[-1.0], [1.0], [0.0]], 1),
    "dy_f": ([[0.0], [-1.0], [1.0]], 1),
    "dxx": ([[1.0, -2.0, 1.0]], 2),
    "dyy": ([[1.0], [-2.0], [1.0]], 2),
    "dxy": ([[1.0, 0.0, -1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 1.0]], 2),
    "laplace": ([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]], 2),
}


def fdm_stencil(operator: str, h: float = 1.0) -> StencilKernel:
    """Finite-difference kernel; axis 0 is y (index j), axis 1 is x (index i)."""
    if operator not in _FDM:
        raise ValueError(f"unknown difference operator {operator!r}; choose from {sorted(_FDM)}")
    if not h > 0:
        raise ValueError("h must be positive")
    taps, power = _FDM[operator]
    scale = 1.0 / (4 * h * h) if operator == "dxy" else h ** -power
    return StencilKernel.scalar(scale * np.array(taps))


# 1D integrals between hat functions phi_o (shifted by o = -1, 0, 1) and phi_0
# on a unit-spacing grid.
_MASS = np.array([1 / 6, 2 / 3, 1 / 6])          # int phi_o phi_0
_STIFF = np.array([-1.0, 2.0, -1.0])             # int phi_o' phi_0'
_DPHI_PHI = np.array([-0.5, 0.0, 0.5])           # int phi_o' phi_0
_PHI_DPHI = -_DPHI_PHI                           # int phi_o phi_0'


def aniso_coefficient(eps: float, theta: float) -> np.ndarray:
    """Rotated diffusion tensor R(theta) diag(1, eps) R(theta)^T."""
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    return rot @ np.diag([1.0, eps]) @ rot.T


def q1_stencil(C, h: float = 1.0) -> StencilKernel:
    """Q1 stiffness stencil of -div(C grad u) for constant coefficient C.

    ``C`` is indexed by physical coordinates (x, y[, z]); stencil axes run in
    reverse order (..., y, x) to match the row-major field layout. Entry at
    offset o is a(phi_o, phi_0) = int (C grad phi_o) . grad phi_0.
    """
    C = np.asarray(C, dtype=np.float64)
    d = C.shape[0]
    if C.shape != (d, d) or d not in (2, 3):
        raise ContractError("coefficient must be a 2x2 or 3x3 matrix")
    if not np.allclose(C, C.T, rtol=0, atol=1e-14 * np.abs(C).max()):
        raise ValueError("coefficient matrix must be symmetric")
    if np.linalg.eigvalsh(C).min() <= 0:
        raise ValueError("coefficient matrix must be positive definite")
    stencil = np.zeros((3,) * d)
    for p in range(d):
        for q in range(d):
            if C[p, q] == 0:
                continue
            # physical axis a lives on array axis d - 1 - a
            factors = []
            for axis in range(d):
                if p == q == axis:
                    factors.append(_STIFF)
                elif axis == q:
                    factors.append(_DPHI_PHI)
                elif axis == p:
                    factors.append(_PHI_DPHI)
                else:
                    factors.append(_MASS)
            term = factors[d - 1]
            for axis in range(d - 2, -1, -1):
                term = np.multiply.outer(term, factors[axis])
            stencil += C[p, q] * term
    return StencilKernel.scalar(h ** (d - 2) * stencil)


def q1_stencil_2d(C, h: float = 1.0) -> StencilKernel:
    C = np.asarray(C, dtype=np.float64)
    if C.shape != (2, 2):
        raise ContractError("expected a 2x2 coefficient")
    return q1_stencil(C, h)


def q1_stencil_3d(eps, h: float = 1.0) -> StencilKernel:
    """Q1 stencil for C = diag(eps0, eps1, eps2)."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != (3,):
        raise ContractError("expected three diffusion coefficients")
    if np.any(eps <= 0):
        raise ValueError("diffusion coefficients must be positive")
    return q1_stencil(np.diag(eps), h)


def transfer_stencils(d: int = 2) -> tuple[StencilKernel, StencilKernel]:
    """Prolongation and restriction stencils; both equal the linear-interpolation pattern."""
    if d not in (2, 3):
        raise ValueError("dimension must be 2 or 3")
    w = np.array([0.5, 1.0, 0.5])
    taps = w
    for _ in range(d - 1):
        taps = np.multiply.outer(taps, w)
    P = StencilKernel.scalar(taps)
    return P, P


@dataclass(frozen=True, eq=False)
class LevelOperator:
    stencil: StencilKernel
    level: int = 1

    @property
    def ndim(self) -> int:
        return self.stencil.ndim


def _as_stencil(A) -> StencilKernel:
    return A.stencil if isinstance(A, LevelOperator) else A


def galerkin_coarse(A, P, R, patch: int | None = None) -> LevelOperator:
    """Coarse stencil of R * A * P by applying the composition to coarse deltas."""
    level = A.level + 1 if isinstance(A, LevelOperator) else 2
    A, P, R = _as_stencil(A), _as_stencil(P), _as_stencil(R)
    if A.coef.shape[:2] != (1, 1):
        raise ContractError("Galerkin coarsening supports single-channel operators")
    d = A.ndim
    # radius of the composed operator on the coarse grid
    rad = [(rp + ra + rr) // 2 for rp, ra, rr in
           zip((t // 2 for t in P.taps), (t // 2 for t in A.taps), (t // 2 for t in R.taps))]
    needed = [2 * r + 3 for r in rad]
    ext = needed if patch is None else [int(patch)] * d
    if any(e < n for e, n in zip(ext, needed)):
        raise ContractError(f"patch of {ext} coarse nodes cannot hold a stencil of radius {rad}")
    center = tuple(e // 2 for e in ext)
    out = np.zeros(tuple(2 * r + 1 for r in rad))
    for offs in np.ndindex(*out.shape):
        delta = np.zeros((1,) + tuple(ext))
        pos = tuple(c + o - r for c, o, r in zip(center, offs, rad))
        delta[(0,) + pos] = 1.0
        image = restrict(R, correlate(A.coef, prolong(P, delta)))
        out[offs] = image[(0,) + center]
    return LevelOperator(StencilKernel.scalar(out), level)


def build_levels(A, levels: int, P=None, R=None) -> list[LevelOperator]:
    """Galerkin hierarchy starting from the fine operator ``A``."""
    A = A if isinstance(A, LevelOperator) else LevelOperator(A, 1)
    if P is None or R is None:
        P, R = transfer_stencils(A.ndim)
    ops = [A]
    for _ in range(levels - 1):
        ops.append(galerkin_coarse(ops[-1], P, R))
    return ops


def assemble_matrix(A, extent) -> sp.csr_matrix:
    """Explicit operator with ``M @ v.ravel() == conv(A, v).ravel()``.

    Rows and columns follow the channel-major, row-major flattening of fields.
    """
    K = _as_stencil(A)
    extent = tuple(int(e) for e in np.atleast_1d(extent))
    if len(extent) == 1:
        extent = extent * K.ndim
    if len(extent) != K.ndim:
        raise ContractError(f"extent {extent} does not match a {K.ndim}-D stencil")
    size = int(np.prod(extent))
    half = [t // 2 for t in K.taps]
    idx = np.arange(size).reshape(extent)
    rows, cols, vals = [], [], []
    for o in range(K.out_channels):
        for c in range(K.in_channels):
            taps = K.coef[o, c]
            for offs in np.ndindex(*taps.shape):
                w = taps[offs]
                if w == 0:
                    continue
                shift = [t - h for t, h in zip(offs, half)]
                dst = tuple(slice(max(0, -s), n - max(0, s)) for s, n in zip(shift, extent))
                src = tuple(slice(max(0, s), n + min(0, s)) for s, n in zip(shift, extent))
                r = idx[dst].ravel()
                rows.append(o * size + r)
                cols.append(c * size + idx[src].ravel())
                vals.append(np.full(r.size, w))
    shape = (K.out_channels * size, K.in_channels * size)
    if not rows:
        return sp.csr_matrix(shape)
    M = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=shape)
    M = M.tocsr()
    M.sum_duplicates()
    M.sort_indices()
    return M


@dataclass(frozen=True)
class PdeSpec:
    """Model problem: family plus parameters and mesh cells per axis.

    ``params`` is ``(eps, theta)`` for aniso2d and ``(eps0, eps1, eps2)`` for
    aniso3d. For fdm_custom, ``params`` holds the operator names summed into
    the stencil.
    """

    family: str
    params: tuple
    n: int = 64

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(self.params))
        if self.n < 4 or self.n & (self.n - 1):
            raise ValueError(f"mesh cells per axis must be a power of two >= 4, got {self.n}")
        if self.family == "aniso2d":
            eps, theta = self.params
            if not 0 < eps <= 1:
                raise ValueError(f"eps must lie in (0, 1], got {eps}")
            if not 0 <= theta <= math.pi + 1e-12:
                raise ValueError(f"theta must lie in [0, pi], got {theta}")
        elif self.family == "aniso3d":
            if len(self.params) != 3 or min(self.params) <= 0:
                raise ValueError("aniso3d needs three positive coefficients")
            if self.params[0] != 1:
                raise ValueError("eps0 is fixed to 1 for aniso3d")
        elif self.family == "fdm_custom":
            for name in self.params:
                if name not in _FDM:
                    raise ValueError(f"unknown difference operator {name!r}")
        else:
            raise ValueError(f"unknown PDE family {self.family!r}")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def ndim(self) -> int:
        return 3 if self.family == "aniso3d" else 2

    @property
    def extent(self) -> tuple:
        return (self.n - 1,) * self.ndim

    def stencil(self) -> StencilKernel:
        """Fine-level operator with h absorbed (unit mesh spacing)."""
        if self.family == "aniso2d":
            return q1_stencil_2d(aniso_coefficient(*self.params))
        if self.family == "aniso3d":
            return q1_stencil_3d(self.params)
        # negative sum of the requested differences, scaled to unit spacing
        total = np.zeros((3, 3))
        for name in self.params:
            taps = fdm_stencil(name, 1.0).taps_array
            pad = [((3 - s) // 2, (3 - s) // 2) for s in taps.shape]
            total -= np.pad(taps, pad)
        return StencilKernel.scalar(total)
