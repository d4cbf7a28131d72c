"""Independent reference implementations used to compute expected values."""
import itertools

import numpy as np
from numpy.polynomial.legendre import leggauss


def brute_correlate(coef, v):
    """Plain nested loops over outputs, channels and taps."""
    coef = np.asarray(coef, dtype=float)
    v = np.asarray(v, dtype=float)
    cout, cin = coef.shape[:2]
    taps = coef.shape[2:]
    ext = v.shape[1:]
    half = [t // 2 for t in taps]
    out = np.zeros((cout,) + ext)
    for l in range(cout):
        for node in itertools.product(*[range(n) for n in ext]):
            s = 0.0
            for k in range(cin):
                for off in itertools.product(*[range(t) for t in taps]):
                    src = tuple(p + o - h for p, o, h in zip(node, off, half))
                    if all(0 <= q < n for q, n in zip(src, ext)):
                        s += coef[(l, k) + off] * v[(k,) + src]
            out[(l,) + node] = s
    return out


def _hat(x):
    return max(0.0, 1.0 - abs(x))


def _dhat(x):
    if -1 < x < 0:
        return 1.0
    if 0 < x < 1:
        return -1.0
    return 0.0


def q1_quadrature(C):
    """Q1 stencil by Gauss quadrature over the elements around the origin.

    Stencil axes run (.., y, x); ``C`` is indexed by (x, y[, z]). Entry at
    offset o is the integral of (C grad phi_o) . grad phi_0 on a unit mesh.
    """
    C = np.asarray(C, dtype=float)
    d = C.shape[0]
    pts, wts = leggauss(3)
    out = np.zeros((3,) * d)
    for elem in itertools.product([-1, 0], repeat=d):
        for qi in itertools.product(range(3), repeat=d):
            # physical point (x, y[, z]) inside element [elem, elem + 1]
            x = np.array([elem[a] + 0.5 * (pts[qi[a]] + 1) for a in range(d)])
            w = np.prod([0.5 * wts[qi[a]] for a in range(d)])

            def grad(shift):
                g = np.empty(d)
                for a in range(d):
                    g[a] = _dhat(x[a] - shift[a]) * np.prod(
                        [_hat(x[b] - shift[b]) for b in range(d) if b != a])
                return g

            g0 = grad(np.zeros(d))
            for off in itertools.product([-1, 0, 1], repeat=d):
                # off is in physical order (x, y, z); stencil index reversed
                go = grad(np.array(off, dtype=float))
                out[tuple(o + 1 for o in reversed(off))] += w * (C @ go) @ g0
    return out


def dense_transfer(P_taps, n_coarse, d):
    """Explicit prolongation matrix for vertex-centered coarsening."""
    n_fine = 2 * n_coarse + 1
    taps = np.asarray(P_taps)
    half = taps.shape[0] // 2
    size_f, size_c = n_fine ** d, n_coarse ** d
    M = np.zeros((size_f, size_c))
    for cj, cnode in enumerate(itertools.product(range(n_coarse), repeat=d)):
        centre = [2 * c + 1 for c in cnode]
        for off in itertools.product(range(-half, half + 1), repeat=d):
            fnode = [c + o for c, o in zip(centre, off)]
            if all(0 <= q < n_fine for q in fnode):
                # correlation with zero insertion: fine(x) += K[c - x] coarse
                w = taps[tuple(half - o for o in off)]
                M[np.ravel_multi_index(fnode, (n_fine,) * d), cj] += w
    return M


def dense_stencil_matrix(taps, n, d):
    taps = np.asarray(taps)
    half = taps.shape[0] // 2
    size = n ** d
    M = np.zeros((size, size))
    for i, node in enumerate(itertools.product(range(n), repeat=d)):
        for off in itertools.product(range(-half, half + 1), repeat=d):
            src = [p + o for p, o in zip(node, off)]
            if all(0 <= q < n for q in src):
                M[i, np.ravel_multi_index(src, (n,) * d)] += taps[tuple(o + half for o in off)]
    return M


def dense_galerkin(A_taps, P_taps, d, n_coarse=5):
    """Centre row of R A P (R = P^T) read off as a coarse stencil."""
    P = dense_transfer(P_taps, n_coarse, d)
    A = dense_stencil_matrix(A_taps, 2 * n_coarse + 1, d)
    Ac = P.T @ A @ P
    centre = np.ravel_multi_index((n_coarse // 2,) * d, (n_coarse,) * d)
    row = Ac[centre].reshape((n_coarse,) * d)
    c = n_coarse // 2
    return row[tuple(slice(c - 1, c + 2) for _ in range(d))]
