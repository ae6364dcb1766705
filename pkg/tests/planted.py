"""Random conic programs with a known primal-dual optimal pair or a known Farkas ray."""

import numpy as np
import scipy.sparse as sp

from ropf.conic import ConicProgram, svec


def _dims(rng):
    f = int(rng.integers(0, 3))
    l = int(rng.integers(0, 6))
    dims = tuple(int(d) for d in rng.integers(1, 6, size=rng.integers(1, 4)))
    return f, l, dims


def _size(f, l, dims):
    return f + l + sum(d * (d + 1) // 2 for d in dims)


def planted_optimal(rng):
    """Program whose optimum is ``c'x*`` for a strictly complementary planted pair."""
    f, l, dims = _dims(rng)
    n = _size(f, l, dims)
    m = int(rng.integers(max(1, f), n))
    A = rng.standard_normal((m, n))
    xl = np.where(rng.random(l) < 0.5, rng.random(l) + 0.1, 0.0)
    zl = np.where(xl > 0, 0.0, rng.random(l) + 0.1)
    xs, zs = [], []
    for d in dims:
        Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        r = d // 2
        ex = np.r_[rng.random(r) + 0.1, np.zeros(d - r)]
        ez = np.r_[np.zeros(r), rng.random(d - r) + 0.1]
        xs.append(svec(Q @ np.diag(ex) @ Q.T))
        zs.append(svec(Q @ np.diag(ez) @ Q.T))
    x = np.concatenate([rng.standard_normal(f), xl, *xs])
    z = np.concatenate([np.zeros(f), zl, *zs])
    y = rng.standard_normal(m)
    prog = ConicProgram(A.T @ y + z, sp.csr_matrix(A), A @ x, f, l, dims)
    return prog, float(prog.c @ x)


def planted_infeasible(rng):
    """Primal infeasible by construction: ``A'y = -s`` with ``s`` interior to K*, ``b'y = 1``."""
    f, l, dims = _dims(rng)
    n = _size(f, l, dims)
    m = int(rng.integers(max(2, f + 1), n + 2))
    s = np.concatenate(
        [np.zeros(f), rng.random(l) + 0.5]
        + [svec(np.eye(d) * 0.5 + (lambda G: G @ G.T)(rng.standard_normal((d, d)) / d)) for d in dims]
    )
    y = rng.standard_normal(m)
    R = rng.standard_normal((m, n))
    A = R - np.outer(y, y @ R + s) / (y @ y)
    b = rng.standard_normal(m)
    b += y * (1.0 - b @ y) / (y @ y)
    c = rng.standard_normal(n)
    return ConicProgram(c, sp.csr_matrix(A), b, f, l, dims)
