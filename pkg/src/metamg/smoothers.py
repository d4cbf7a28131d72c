"""Smoothers: damped Jacobi, Gauss-Seidel, line Gauss-Seidel and subspace correction.

All functions take a residual field of shape ``(1, *extent)`` (or batched
``(batch, 1, *extent)``) and return the correction ``e = B r``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np
import scipy.sparse as sp

from .autodiff import ArrayOps
from .discretization import LevelOperator, assemble_matrix
from .grid import ContractError, StencilKernel, correlate

SMOOTHER_KINDS = ("jacobi", "gs", "line_gs", "krylov", "conv", "meta_sc", "meta_direct")


@dataclass(frozen=True)
class SmootherSpec:
    """Which smoother to run, plus its knobs.

    ``conv``, ``meta_sc`` and ``meta_direct`` are learned smoothers whose
    parameters live in a model (see :mod:`metamg.mgnet`).
    """

    kind: str = "gs"
    omega: float = 2.0 / 3.0
    axis: int = 1
    depth: int = 9

    def __post_init__(self):
        if self.kind not in SMOOTHER_KINDS:
            raise ValueError(f"unknown smoother {self.kind!r}; choose from {SMOOTHER_KINDS}")
        if not 0 < self.omega <= 1:
            raise ValueError(f"Jacobi damping must lie in (0, 1], got {self.omega}")
        if self.depth < 0:
            raise ValueError("Krylov depth must be non-negative")

    @property
    def learned(self) -> bool:
        return self.kind in ("conv", "meta_sc", "meta_direct")


@dataclass(frozen=True, eq=False)
class SubspaceBasis:
    """L grid fields spanning a correction subspace, stored as ``(L, *extent)``."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim < 2 or v.shape[0] < 1:
            raise ContractError("subspace basis needs at least one vector")
        if not np.all(np.isfinite(v)):
            raise ValueError("subspace vectors must be finite")
        if not np.any(v):
            raise ValueError("subspace basis has only zero vectors")
        object.__setattr__(self, "vectors", v)

    @property
    def columns(self) -> int:
        return self.vectors.shape[0]

    def matrix(self) -> np.ndarray:
        """The ``n x L`` matrix whose columns are the flattened vectors."""
        return self.vectors.reshape(self.columns, -1).T


def _stencil(A) -> StencilKernel:
    return A.stencil if isinstance(A, LevelOperator) else A


def jacobi_apply(A, r, omega: float = 2.0 / 3.0):
    K = _stencil(A)
    diag = K.center()
    if diag == 0:
        raise ZeroDivisionError("stencil has a zero center tap")
    return omega * np.asarray(r, dtype=np.float64) / diag


@nb.njit(cache=True)
def _forward_substitution(indptr, indices, data, b):
    n = b.shape[0]
    x = np.zeros(n)
    for i in range(n):
        s = b[i]
        diag = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            j = indices[k]
            if j < i:
                s -= data[k] * x[j]
            elif j == i:
                diag = data[k]
        x[i] = s / diag
    return x


@nb.njit(cache=True)
def _line_sweep(taps, r):
    # lines run along the last axis and are swept in increasing row order
    ny, nx = r.shape
    hy, hx = taps.shape[0] // 2, taps.shape[1] // 2
    a, b, c = taps[hy, hx - 1], taps[hy, hx], taps[hy, hx + 1]
    x = np.zeros((ny, nx))
    rhs = np.empty(nx)
    cp = np.empty(nx)
    dp = np.empty(nx)
    for j in range(ny):
        for i in range(nx):
            s = r[j, i]
            for dj in range(-hy, 0):
                jj = j + dj
                if jj < 0:
                    continue
                for di in range(-hx, hx + 1):
                    ii = i + di
                    if 0 <= ii < nx:
                        s -= taps[hy + dj, hx + di] * x[jj, ii]
            rhs[i] = s
        # Thomas algorithm for the constant-coefficient tridiagonal line
        cp[0] = c / b
        dp[0] = rhs[0] / b
        for i in range(1, nx):
            m = b - a * cp[i - 1]
            cp[i] = c / m
            dp[i] = (rhs[i] - a * dp[i - 1]) / m
        x[j, nx - 1] = dp[nx - 1]
        for i in range(nx - 2, -1, -1):
            x[j, i] = dp[i] - cp[i] * x[j, i + 1]
    return x


class _TrilCache:
    """Lower-triangular CSR parts of assembled level matrices."""

    def __init__(self):
        self._store = {}

    def get(self, K: StencilKernel, extent):
        key = (id(K), tuple(extent))
        hit = self._store.get(key)
        if hit is None or hit[0] is not K:
            M = assemble_matrix(K, extent)
            if np.any(M.diagonal() == 0):
                raise ZeroDivisionError("triangular solve with a zero diagonal entry")
            tril = sp.tril(M, format="csr")
            tril.sort_indices()
            hit = (K, tril)
            self._store[key] = hit
        return hit[1]


_TRIL = _TrilCache()


def gs_apply(A, r):
    """``tril(A)^{-1} r`` in lexicographic (row-major) order."""
    K = _stencil(A)
    r = np.asarray(r, dtype=np.float64)
    d = K.ndim
    extent = r.shape[-d:]
    tril = _TRIL.get(K, extent)
    flat = r.reshape(-1, int(np.prod(extent)))
    out = np.empty_like(flat)
    for b in range(flat.shape[0]):
        out[b] = _forward_substitution(tril.indptr, tril.indices, tril.data, flat[b])
    return out.reshape(r.shape)


def line_gs_apply(A, r, axis: int = 1):
    """Block Gauss-Seidel with exact tridiagonal solves along lines of ``axis``.

    ``axis`` indexes the spatial axes: 1 solves along x (rows swept in
    increasing y), 0 solves along y (columns swept in increasing x).
    """
    K = _stencil(A)
    if K.ndim != 2:
        raise ContractError("line Gauss-Seidel is implemented for 2-D problems")
    if K.coef.shape[:2] != (1, 1):
        raise ContractError("line Gauss-Seidel needs a single-channel operator")
    taps = K.taps_array
    if axis == 0:
        taps = taps.T
    elif axis != 1:
        raise ValueError("axis must be 0 or 1")
    hy, hx = taps.shape[0] // 2, taps.shape[1] // 2
    if hx < 1:
        taps = np.pad(taps, ((0, 0), (1, 1)))
        hx = 1
    line = taps[hy]
    if np.any(line[:hx - 1]) or np.any(line[hx + 2:]):
        raise ContractError("line coupling is not tridiagonal")
    if taps[hy, hx] == 0:
        raise ZeroDivisionError("stencil has a zero center tap")
    taps = np.ascontiguousarray(taps)
    r = np.asarray(r, dtype=np.float64)
    lead = r.shape[:-2]
    flat = r.reshape((-1,) + r.shape[-2:])
    out = np.empty_like(flat)
    for b in range(flat.shape[0]):
        field = flat[b] if axis == 1 else flat[b].T
        x = _line_sweep(taps, np.ascontiguousarray(field))
        out[b] = x if axis == 1 else x.T
    return out.reshape(lead + r.shape[-2:])


def subspace_correction(ops, coef, G, r):
    """``e = G (G^T A G)^{-1} G^T r`` on batched fields.

    ``coef`` holds per-sample operator stencils ``(batch, 1, 1, *taps)``,
    ``G`` has shape ``(batch, L, *extent)`` and ``r`` ``(batch, 1, *extent)``.
    Works with any ops backend, so it is differentiable under a tape.
    """
    gshape = ops.value(G).shape
    batch, L, ext = gshape[0], gshape[1], gshape[2:]
    n = int(np.prod(ext))
    colA = np.repeat(coef, L, axis=0)
    S = ops.conv(colA, ops.reshape(G, (batch * L, 1) + ext), per_sample=True)
    Gf = ops.reshape(G, (batch, L, n))
    Sf = ops.reshape(S, (batch, L, n))
    rf = ops.reshape(r, (batch, n))
    M = ops.einsum("blp,bkp->blk", Gf, Sf)
    rhs = ops.einsum("blp,bp->bl", Gf, rf)
    c = ops.spd_solve(M, rhs)
    e = ops.einsum("blp,bl->bp", Gf, c)
    return ops.reshape(e, (batch, 1) + ext)


def _field_batch(r, d):
    r = np.asarray(r, dtype=np.float64)
    if r.ndim == d:
        return r[None, None], lambda e: e[0, 0]
    if r.ndim == d + 1:
        return r[None], lambda e: e[0]
    return r, lambda e: e


def sc_apply(A, G, r):
    """Subspace correction of residual ``r`` over ``range(G)``."""
    K = _stencil(A)
    d = K.ndim
    if isinstance(G, SubspaceBasis):
        G = G.vectors
    G = np.asarray(G, dtype=np.float64)
    rb, unwrap = _field_batch(r, d)
    if G.ndim == d + 1:
        G = G[None]
    if G.shape[0] != rb.shape[0] or G.shape[2:] != rb.shape[2:]:
        raise ContractError(f"subspace of shape {G.shape} does not match residual {rb.shape}")
    coef = np.broadcast_to(K.coef, (rb.shape[0],) + K.coef.shape)
    return unwrap(subspace_correction(ArrayOps(), coef, G, rb))


def krylov_basis(A, r, k: int) -> np.ndarray:
    """Orthonormal basis of span{r, Ar, ..., A^k r} (same range as the monomials)."""
    K = _stencil(A)
    r = np.asarray(r, dtype=np.float64)
    basis = []
    v = r
    for _ in range(k + 1):
        w = v.copy()
        for q in basis:
            w -= np.vdot(q, w) * q
        for q in basis:
            w -= np.vdot(q, w) * q
        norm = np.linalg.norm(w)
        if norm <= 1e-14 * np.linalg.norm(v) or norm == 0:
            break
        w /= norm
        basis.append(w)
        v = correlate(K.coef, w)
    return np.stack(basis, axis=0)


def krylov_sc_apply(A, r, k: int = 9):
    """Subspace correction over the Krylov space of depth ``k``."""
    if k < 0:
        raise ValueError("Krylov depth must be non-negative")
    K = _stencil(A)
    rb, unwrap = _field_batch(r, K.ndim)
    out = np.zeros_like(rb)
    for b in range(rb.shape[0]):
        if not np.any(rb[b]):
            continue
        G = krylov_basis(K, rb[b], k)
        # basis vectors carry the channel axis: (L, 1, *ext) -> (L, *ext)
        out[b] = sc_apply(K, G[:, 0], rb[b])
    return unwrap(out)
