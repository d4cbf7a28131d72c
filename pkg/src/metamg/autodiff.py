"""Tape-based reverse-mode differentiation over a closed set of primitives.

The solver code is written against a small "ops" interface. ``ArrayOps``
evaluates on plain arrays; ``Tape`` wraps values in ``Var`` nodes and records
a backward closure per primitive, so the same code path yields gradients.
"""
from __future__ import annotations

import numpy as np

from . import grid


class NonFiniteGradient(FloatingPointError):
    pass


class ArrayOps:
    """Plain numpy evaluation of the primitive set."""

    recording = False

    def value(self, x):
        return x

    def const(self, x):
        return np.asarray(x, dtype=np.float64)

    def add(self, a, b):
        return a + b

    def sub(self, a, b):
        return a - b

    def scale(self, a, s):
        return a * s

    def mul(self, a, b):
        return a * b

    def relu(self, x):
        return np.maximum(x, 0.0)

    def dense(self, x, w, b):
        return x @ w + b

    def reshape(self, x, shape):
        return np.reshape(x, shape)

    def concat(self, xs, axis=1):
        return np.concatenate(xs, axis=axis)

    def take(self, x, index):
        return x[index]

    def sumsq(self, x):
        """Per-sample sum of squares, shape (batch,)."""
        return np.sum(x.reshape(x.shape[0], -1) ** 2, axis=1)

    def mean(self, x):
        return np.mean(x)

    def rms_normalize(self, x):
        rms = np.sqrt(np.mean(x.reshape(x.shape[0], -1) ** 2, axis=1))
        rms = np.where(rms > 0, rms, 1.0)
        return x / rms.reshape((-1,) + (1,) * (x.ndim - 1))

    def einsum(self, spec, a, b):
        return np.einsum(spec, a, b)

    def conv(self, coef, v, per_sample=False):
        return grid.correlate(coef, v, per_sample)

    def restrict(self, R, v):
        return grid.restrict(R, v)

    def prolong(self, P, v):
        return grid.prolong(P, v)

    def linear_map(self, forward, adjoint, x):
        """Constant linear map (e.g. an exact coarse solve)."""
        return forward(x)

    def spd_solve(self, M, b):
        return spd_solve(M, b)[0]


class Var:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var({self.name or ''} shape={self.value.shape})"


def _val(x):
    return x.value if isinstance(x, Var) else x


def _needs(x):
    return isinstance(x, Var) and x.requires_grad


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tape(ArrayOps):
    """Records primitives applied to ``Var`` inputs for a reverse sweep.

    Nodes are appended in execution order, so walking the list backwards is a
    reverse topological order and visits every node exactly once.
    """

    recording = True

    def __init__(self):
        self.nodes = []
        self.params = {}

    def param(self, value, name):
        v = Var(np.asarray(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = v
        return v

    def value(self, x):
        return _val(x)

    def const(self, x):
        return Var(np.asarray(x, dtype=np.float64))

    def _record(self, out_value, inputs, backward):
        out = Var(out_value, requires_grad=any(_needs(x) for x in inputs))
        if out.requires_grad:
            self.nodes.append((out, inputs, backward))
        return out

    # elementwise and dense-layer primitives

    def add(self, a, b):
        av, bv = _val(a), _val(b)
        return self._record(av + bv, (a, b), lambda g: (_unbroadcast(g, np.shape(av)), _unbroadcast(g, np.shape(bv))))

    def sub(self, a, b):
        av, bv = _val(a), _val(b)
        return self._record(av - bv, (a, b), lambda g: (_unbroadcast(g, np.shape(av)), -_unbroadcast(g, np.shape(bv))))

    def scale(self, a, s):
        s = np.asarray(s, dtype=np.float64)
        return self._record(_val(a) * s, (a,), lambda g: (g * s,))

    def mul(self, a, b):
        av, bv = _val(a), _val(b)
        return self._record(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, np.shape(av)), _unbroadcast(g * av, np.shape(bv))))

    def relu(self, x):
        xv = _val(x)
        mask = xv > 0
        return self._record(np.where(mask, xv, 0.0), (x,), lambda g: (g * mask,))

    def dense(self, x, w, b):
        xv, wv = _val(x), _val(w)
        out = xv @ wv + _val(b)
        return self._record(out, (x, w, b), lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)))

    def reshape(self, x, shape):
        old = _val(x).shape
        return self._record(np.reshape(_val(x), shape), (x,), lambda g: (g.reshape(old),))

    def concat(self, xs, axis=1):
        vals = [_val(x) for x in xs]
        bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
        return self._record(np.concatenate(vals, axis=axis), tuple(xs),
                            lambda g: tuple(np.split(g, bounds, axis=axis)))

    def take(self, x, index):
        xv = _val(x)

        def back(g):
            full = np.zeros_like(xv)
            full[index] = g
            return (full,)
        return self._record(xv[index], (x,), back)

    def sumsq(self, x):
        xv = _val(x)
        out = np.sum(xv.reshape(xv.shape[0], -1) ** 2, axis=1)
        return self._record(out, (x,), lambda g: (2.0 * xv * g.reshape((-1,) + (1,) * (xv.ndim - 1)),))

    def mean(self, x):
        xv = _val(x)
        return self._record(np.mean(xv), (x,), lambda g: (np.full(xv.shape, g / xv.size),))

    def rms_normalize(self, x):
        xv = _val(x)
        n = xv[0].size
        flat = xv.reshape(xv.shape[0], -1)
        rms = np.sqrt(np.mean(flat ** 2, axis=1))
        rms = np.where(rms > 0, rms, 1.0)
        y = flat / rms[:, None]

        def back(g):
            gf = g.reshape(y.shape)
            proj = np.sum(gf * y, axis=1, keepdims=True) / n
            return (((gf - y * proj) / rms[:, None]).reshape(xv.shape),)
        return self._record(y.reshape(xv.shape), (x,), back)

    def einsum(self, spec, a, b):
        av, bv = _val(a), _val(b)
        ins, out_sub = spec.split("->")
        sa, sb = ins.split(",")
        out = np.einsum(spec, av, bv)

        def grad_for(g, own, other_sub, other_val, own_shape):
            present = set(out_sub) | set(other_sub)
            kept = "".join(c for c in own if c in present)
            r = np.einsum(f"{out_sub},{other_sub}->{kept}", g, other_val)
            if kept != own:
                # letters summed out of this operand alone: broadcast back
                shape = [own_shape[own.index(c)] if c in kept else 1 for c in own]
                r = np.broadcast_to(r.reshape(shape), own_shape)
            return r

        return self._record(out, (a, b), lambda g: (
            grad_for(g, sa, sb, bv, av.shape) if _needs(a) else None,
            grad_for(g, sb, sa, av, bv.shape) if _needs(b) else None,
        ))

    # grid primitives

    def conv(self, coef, v, per_sample=False):
        cv, vv = _val(coef), _val(v)
        out = grid.correlate(cv, vv, per_sample)
        lead = 3 if per_sample else 2
        taps = cv.shape[lead:]

        def back(g):
            gv = grid.correlate(grid.flip_coef(cv, per_sample), g, per_sample) if _needs(v) else None
            gk = None
            if _needs(coef):
                gk = grid.correlate_kernel_grad(g, vv, taps, per_sample)
            return gk, gv
        return self._record(out, (coef, v), back)

    def restrict(self, R, v):
        vv = _val(v)
        return self._record(grid.restrict(R, vv), (v,), lambda g: (grid.prolong(grid.StencilKernel(grid.flip_coef(R.coef)), g),))

    def prolong(self, P, v):
        vv = _val(v)
        return self._record(grid.prolong(P, vv), (v,), lambda g: (grid.restrict(grid.StencilKernel(grid.flip_coef(P.coef)), g),))

    def linear_map(self, forward, adjoint, x):
        return self._record(forward(_val(x)), (x,), lambda g: (adjoint(g),))

    def spd_solve(self, M, b):
        Mv, bv = _val(M), _val(b)
        c, factor = spd_solve(Mv, bv)

        def back(g):
            gb = factor(g)
            gM = -np.einsum("bi,bj->bij", gb, c)
            return gM, gb
        return self._record(c, (M, b), back)

    # reverse sweep

    def backward(self, loss):
        """Accumulate d(loss)/d(param) into ``param.grad`` and return them by name."""
        if not isinstance(loss, Var) or np.size(loss.value) != 1:
            raise ValueError("backward needs a scalar Var")
        for p in self.params.values():
            p.grad = np.zeros_like(p.value)
        loss.grad = np.ones_like(loss.value)
        for out, inputs, back in reversed(self.nodes):
            if out.grad is None:
                continue
            grads = back(out.grad)
            for x, g in zip(inputs, grads):
                if g is None or not _needs(x):
                    continue
                if x.grad is None:
                    x.grad = np.array(g, dtype=np.float64)
                else:
                    x.grad = x.grad + g
            out.grad = None
        result = {}
        for name, p in self.params.items():
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
            result[name] = p.grad
        return result


class SingularSubspace(np.linalg.LinAlgError):
    pass


def spd_solve(M, b, jitter=1e-12):
    """Batched solve of ``M c = b`` for symmetric positive (semi)definite ``M``.

    ``M`` is symmetrically rescaled to unit diagonal before a Cholesky
    factorization; on failure ``jitter * trace / L`` is added to the diagonal
    once. Returns the solution and a callable applying ``M^{-1}`` again (the
    adjoint solve, since ``M`` is symmetric).
    """
    M = np.asarray(M, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    L = M.shape[-1]
    diag = np.diagonal(M, axis1=-2, axis2=-1)
    d = np.where(diag > 0, 1.0 / np.sqrt(np.where(diag > 0, diag, 1.0)), 1.0)
    Ms = M * d[..., :, None] * d[..., None, :]
    Ms = 0.5 * (Ms + np.swapaxes(Ms, -1, -2))
    try:
        chol = np.linalg.cholesky(Ms)
    except np.linalg.LinAlgError:
        chol = np.empty_like(Ms)
        for idx in np.ndindex(*Ms.shape[:-2]):
            try:
                chol[idx] = np.linalg.cholesky(Ms[idx])
            except np.linalg.LinAlgError:
                trace = np.trace(Ms[idx])
                bump = jitter * (trace if trace > 0 else 1.0) / L
                try:
                    chol[idx] = np.linalg.cholesky(Ms[idx] + bump * np.eye(L))
                except np.linalg.LinAlgError as err:
                    raise SingularSubspace("subspace Gram matrix is not factorizable after jitter") from err

    def apply_inverse(rhs):
        y = np.linalg.solve(chol, (d * rhs)[..., None])
        z = np.linalg.solve(np.swapaxes(chol, -1, -2), y)
        return d * z[..., 0]

    c = apply_inverse(b)
    if not np.all(np.isfinite(c)):
        raise SingularSubspace("subspace solve produced non-finite coefficients")
    return c, apply_inverse
