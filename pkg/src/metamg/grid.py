"""Grid fields and the three stencil convolutions (plain, strided, transposed).

A grid field is a float64 array of shape ``(channels, *extent)``; an extra
leading batch axis ``(batch, channels, *extent)`` is accepted everywhere.
Out-of-range entries are treated as zero, which is how homogeneous Dirichlet
boundaries enter: only interior nodes are stored.

Convolution here follows the correlation convention

    (K * v)[l, j, i] = sum_k sum_{dj, di} K[l, k, dj, di] v[k, j + dj, i + di]

with the tap index measured from the kernel center.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np


class ContractError(ValueError):
    """Raised when array shapes or channel counts do not fit together."""


def _as_tuple(value, d):
    if np.isscalar(value):
        return (int(value),) * d
    value = tuple(int(v) for v in value)
    if len(value) != d:
        raise ContractError(f"expected {d} per-axis values, got {len(value)}")
    return value


@dataclass(frozen=True, eq=False)
class StencilKernel:
    """Coefficient tensor ``coef[out, in, *taps]`` with odd, centered taps."""

    coef: np.ndarray

    def __post_init__(self):
        coef = np.array(self.coef, dtype=np.float64)
        if coef.ndim < 3:
            raise ContractError("stencil needs shape (out, in, *taps)")
        if any(t % 2 == 0 for t in coef.shape[2:]):
            raise ContractError(f"taps must be odd along every axis, got {coef.shape[2:]}")
        if not np.all(np.isfinite(coef)):
            raise ContractError("stencil coefficients must be finite")
        coef.setflags(write=False)
        object.__setattr__(self, "coef", coef)

    @classmethod
    def scalar(cls, taps) -> "StencilKernel":
        """Single-channel stencil from a plain d-dimensional tap array."""
        taps = np.asarray(taps, dtype=np.float64)
        return cls(taps[None, None])

    @classmethod
    def delta(cls, d=2, taps=1) -> "StencilKernel":
        shape = _as_tuple(taps, d)
        k = np.zeros(shape)
        k[tuple(s // 2 for s in shape)] = 1.0
        return cls.scalar(k)

    @property
    def out_channels(self) -> int:
        return self.coef.shape[0]

    @property
    def in_channels(self) -> int:
        return self.coef.shape[1]

    @property
    def taps(self) -> tuple:
        return self.coef.shape[2:]

    @property
    def ndim(self) -> int:
        return self.coef.ndim - 2

    @property
    def taps_array(self) -> np.ndarray:
        """The tap array of a single-channel stencil."""
        if self.coef.shape[:2] != (1, 1):
            raise ContractError("taps_array is only defined for single-channel stencils")
        return self.coef[0, 0]

    def center(self) -> float:
        return float(self.taps_array[tuple(t // 2 for t in self.taps)])

    def scaled(self, alpha) -> "StencilKernel":
        return StencilKernel(alpha * self.coef)

    def flipped(self) -> "StencilKernel":
        """Index-negated, channel-transposed stencil (the adjoint operator)."""
        spatial = tuple(range(2, self.coef.ndim))
        return StencilKernel(np.flip(self.coef, axis=spatial).swapaxes(0, 1))

    def __str__(self):
        return format_stencil(self)


def format_stencil(K: StencilKernel) -> str:
    """Row-major plain-text dump with 6 significant digits."""
    lines = []
    for o in range(K.out_channels):
        for c in range(K.in_channels):
            taps = K.coef[o, c]
            lines.append(f"# out={o} in={c} taps={'x'.join(map(str, taps.shape))}")
            planes = taps.reshape((-1,) + taps.shape[-2:]) if taps.ndim >= 2 else taps[None, None]
            for p, plane in enumerate(planes):
                if taps.ndim > 2:
                    lines.append(f"# plane {p}")
                for row in plane:
                    lines.append(" ".join(f"{x: .6g}" for x in row))
    return "\n".join(lines)


def _coef(K):
    return K.coef if isinstance(K, StencilKernel) else np.asarray(K, dtype=np.float64)


@nb.njit(cache=True, fastmath=True)
def _correlate_2d(coef, vp, out):
    # coef (B, O, C, ty, tx), padded vp (B, C, ny + ty - 1, nx + tx - 1)
    nb_, no, nc, ty, tx = coef.shape
    ny, nx = out.shape[2], out.shape[3]
    for b in range(nb_):
        for o in range(no):
            acc = out[b, o]
            for dj in range(ty):
                for di in range(tx):
                    for c in range(nc):
                        w = coef[b, o, c, dj, di]
                        if w == 0.0:
                            continue
                        src = vp[b, c]
                        for j in range(ny):
                            for i in range(nx):
                                acc[j, i] += w * src[j + dj, i + di]


@nb.njit(cache=True, fastmath=True)
def _kernel_grad_2d(g, vp, dk):
    # dk (B, O, C, ty, tx) from g (B, O, ny, nx) and padded vp
    nb_, no, nc, ty, tx = dk.shape
    ny, nx = g.shape[2], g.shape[3]
    for b in range(nb_):
        for o in range(no):
            go = g[b, o]
            for c in range(nc):
                src = vp[b, c]
                for dj in range(ty):
                    for di in range(tx):
                        s = 0.0
                        for j in range(ny):
                            for i in range(nx):
                                s += go[j, i] * src[j + dj, i + di]
                        dk[b, o, c, dj, di] = s


def correlate(coef, v, per_sample=False):
    """Zero-padded multi-channel correlation, the workhorse behind ``conv``.

    ``coef`` has shape ``(out, in, *taps)``, or ``(batch, out, in, *taps)`` when
    ``per_sample`` is set, in which case ``v`` must be batched as well.
    Taps are visited in row-major order (innermost axis fastest).
    """
    coef = np.asarray(coef, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    lead = 3 if per_sample else 2
    d = coef.ndim - lead
    taps = coef.shape[lead:]
    cout, cin = coef.shape[lead - 2:lead]
    if v.ndim not in (d + 1, d + 2) or (per_sample and v.ndim != d + 2):
        raise ContractError(f"field of shape {v.shape} does not match a {d}-D stencil")
    if v.shape[-d - 1] != cin:
        raise ContractError(f"stencil expects {cin} input channels, field has {v.shape[-d - 1]}")
    if per_sample and v.shape[0] != coef.shape[0]:
        raise ContractError("batch size of per-sample stencils and field differ")
    ext = v.shape[-d:]
    batch = v.shape[:-d - 1]
    half = [t // 2 for t in taps]
    vp = np.pad(v, [(0, 0)] * (v.ndim - d) + [(h, h) for h in half])
    out = np.zeros(batch + (cout,) + ext)
    single = cout == 1 and cin == 1
    if per_sample and d == 2 and not single:
        _correlate_2d(np.ascontiguousarray(coef), vp, out)
        return out
    for offs in np.ndindex(*taps):
        w = coef[(Ellipsis,) + offs]
        if not np.any(w):
            continue
        window = vp[(Ellipsis,) + tuple(slice(o, o + n) for o, n in zip(offs, ext))]
        if single:
            scale = w.reshape(w.shape[:-2] + (1,) * (d + 1)) if per_sample else w[0, 0]
            out += scale * window
        elif per_sample:
            flat = window.reshape(window.shape[:2] + (-1,))
            out += np.einsum("boc,bcp->bop", w, flat).reshape(out.shape)
        else:
            flat = window.reshape(window.shape[:-d] + (-1,))
            out += np.einsum("oc,...cp->...op", w, flat).reshape(out.shape)
    return out


def correlate_kernel_grad(grad_out, v, taps, per_sample=False):
    """Gradient of ``sum(grad_out * correlate(K, v))`` with respect to ``K``."""
    v = np.asarray(v, dtype=np.float64)
    d = len(taps)
    ext = v.shape[-d:]
    half = [t // 2 for t in taps]
    vp = np.pad(v, [(0, 0)] * (v.ndim - d) + [(h, h) for h in half])
    if v.ndim == d + 1:
        vp = vp[None]
        grad_out = grad_out[None]
    cout, cin = grad_out.shape[1], vp.shape[1]
    g = grad_out.reshape(grad_out.shape[:2] + (-1,))
    shape = ((vp.shape[0],) if per_sample else ()) + (cout, cin) + tuple(taps)
    dk = np.zeros(shape)
    if per_sample and d == 2 and cout * cin > 1:
        _kernel_grad_2d(np.ascontiguousarray(grad_out), np.ascontiguousarray(vp), dk)
        return dk
    for offs in np.ndindex(*taps):
        window = vp[(Ellipsis,) + tuple(slice(o, o + n) for o, n in zip(offs, ext))]
        flat = window.reshape(window.shape[:2] + (-1,))
        if per_sample:
            dk[(Ellipsis,) + offs] = np.einsum("bop,bcp->boc", g, flat)
        else:
            dk[(Ellipsis,) + offs] = np.einsum("bop,bcp->oc", g, flat)
    return dk


def flip_coef(coef, per_sample=False):
    """Adjoint stencil coefficients: negate tap indices, swap channel axes."""
    lead = 3 if per_sample else 2
    axes = tuple(range(lead, coef.ndim))
    return np.flip(coef, axis=axes).swapaxes(lead - 2, lead - 1)


def conv(K, v):
    """``K * v`` with zero padding; output has the extent of ``v``."""
    coef = _coef(K)
    if coef.ndim < 3:
        raise ContractError("stencil needs shape (out, in, *taps)")
    return correlate(coef, v)


def subsample(v, stride, offset=0, out_extent=None):
    """Pick nodes ``offset + stride * j`` along every spatial axis."""
    v = np.asarray(v)
    d = len(out_extent) if out_extent is not None else None
    if d is None:
        raise ContractError("subsample needs the spatial dimension via out_extent")
    stride = _as_tuple(stride, d)
    offset = _as_tuple(offset, d)
    index = tuple(slice(o, o + s * (m - 1) + 1, s) for o, s, m in zip(offset, stride, out_extent))
    out = v[(Ellipsis,) + index]
    if out.shape[-d:] != tuple(out_extent):
        raise ContractError(f"cannot take {out_extent} samples from extent {v.shape[-d:]}")
    return out


def strided_extent(extent, stride, offset=0):
    d = len(extent)
    stride, offset = _as_tuple(stride, d), _as_tuple(offset, d)
    return tuple(-(-(n - o) // s) for n, s, o in zip(extent, stride, offset))


def conv_strided(K, v, stride, offset=0):
    """``(K *_s v)[l, j] = sum K[l, k, dj] v[k, offset + s*j + dj]``.

    With ``offset=0`` the output extent is ``ceil(extent / stride)``.
    """
    coef = _coef(K)
    d = coef.ndim - 2
    v = np.asarray(v, dtype=np.float64)
    out_extent = strided_extent(v.shape[-d:], stride, offset)
    return subsample(correlate(coef, v), stride, offset, out_extent)


def upsample(v, stride, offset=0, out_extent=None):
    """Zero insertion: node ``j`` of ``v`` lands on ``offset + stride * j``."""
    v = np.asarray(v, dtype=np.float64)
    d = len(out_extent) if out_extent is not None else None
    if d is None:
        raise ContractError("upsample needs the spatial dimension via out_extent")
    stride = _as_tuple(stride, d)
    offset = _as_tuple(offset, d)
    ext = v.shape[-d:]
    if any(o + s * (n - 1) >= m for o, s, n, m in zip(offset, stride, ext, out_extent)):
        raise ContractError(f"extent {ext} does not fit into {out_extent} with stride {stride}")
    out = np.zeros(v.shape[:-d] + tuple(out_extent))
    index = tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, stride, ext))
    out[(Ellipsis,) + index] = v
    return out


def deconv(K, v, stride, offset=0, out_extent=None):
    """Transposed convolution, defined as convolution after zero insertion.

    Default output extent is ``stride * extent``.
    """
    coef = _coef(K)
    d = coef.ndim - 2
    v = np.asarray(v, dtype=np.float64)
    stride_t = _as_tuple(stride, d)
    if out_extent is None:
        out_extent = tuple(s * n for s, n in zip(stride_t, v.shape[-d:]))
    return correlate(coef, upsample(v, stride_t, offset, out_extent))


# Vertex-centered hierarchy: interior node j of a coarse grid sits on fine
# interior node 2j + 1, so transfers use offset 1.

def coarse_extent(n: int) -> int:
    if n < 3 or n % 2 == 0:
        raise ContractError(f"cannot coarsen an extent of {n} nodes")
    return (n - 1) // 2


def level_extents(n_cells: int, levels: int) -> list[int]:
    """Interior node counts per level, starting from ``n_cells - 1``."""
    if n_cells < 4 or n_cells & (n_cells - 1):
        raise ContractError(f"mesh cells per axis must be a power of two >= 4, got {n_cells}")
    extents = [n_cells - 1]
    for _ in range(levels - 1):
        extents.append(coarse_extent(extents[-1]))
    if extents[-1] < 1:
        raise ContractError(f"{levels} levels do not fit on a {n_cells}-cell mesh")
    return extents


def restrict(R, v):
    """Fine-to-coarse transfer with a stride-2 convolution."""
    coef = _coef(R)
    d = coef.ndim - 2
    ext = tuple(coarse_extent(n) for n in np.shape(v)[-d:])
    return subsample(correlate(coef, v), 2, 1, ext)


def prolong(P, v):
    """Coarse-to-fine transfer with a stride-2 deconvolution."""
    coef = _coef(P)
    d = coef.ndim - 2
    ext = tuple(2 * n + 1 for n in np.shape(v)[-d:])
    return deconv(coef, v, 2, offset=1, out_extent=ext)
