"""Primal-dual interior-point method for block-diagonal conic programs.

Solves the pair::

    minimize    c'x                 maximize   b'y
    subject to  A x = b             subject to A'y + z = c
                x in K                         z in K*

with ``K = R^f x R_+^l x S_+^{d_1} x ... x S_+^{d_p}``. Semidefinite blocks
are stored as scaled lower-triangle vectors (``svec``: column-major lower
triangle, off-diagonal entries times sqrt(2)) so that inner products are
plain dot products. Free variables have a zero dual slack.

Search directions use Nesterov-Todd scaling with Mehrotra's
predictor-corrector; the Schur complement is assembled densely.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

__all__ = [
    "ConicProgram",
    "ConicSolution",
    "CertificateReport",
    "solve",
    "check_certificate",
    "svec",
    "smat",
]

log = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)


def _tril_index(d: int) -> tuple[np.ndarray, np.ndarray]:
    cols, rows = [], []
    for j in range(d):
        for i in range(j, d):
            rows.append(i)
            cols.append(j)
    return np.asarray(rows), np.asarray(cols)


_TRIL_CACHE: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def _tril(d: int):
    if d not in _TRIL_CACHE:
        r, c = _tril_index(d)
        scale = np.where(r == c, 1.0, SQRT2)
        _TRIL_CACHE[d] = (r, c, scale)
    return _TRIL_CACHE[d]


def svec(X: np.ndarray) -> np.ndarray:
    r, c, s = _tril(X.shape[0])
    return X[r, c] * s


def smat(v: np.ndarray, d: int | None = None) -> np.ndarray:
    if d is None:
        d = int(round((math.sqrt(8 * len(v) + 1) - 1) / 2))
    r, c, s = _tril(d)
    X = np.zeros((d, d))
    X[r, c] = v / s
    X[c, r] = v / s
    return X


def svec_index(d: int, i: int, j: int) -> int:
    """Position of entry ``(i, j)`` of a ``d x d`` block inside its svec."""
    if i < j:
        i, j = j, i
    return j * d - j * (j - 1) // 2 + (i - j)


@dataclass
class ConicProgram:
    c: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    free: int = 0
    nonneg: int = 0
    psd: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        self.c = np.asarray(self.c, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        self.A = sp.csr_matrix(self.A, dtype=float)
        self.psd = tuple(int(d) for d in self.psd)
        if self.A.shape != (len(self.b), self.n):
            raise ValueError(f"A has shape {self.A.shape}, expected {(len(self.b), self.n)}")
        if len(self.c) != self.n:
            raise ValueError("objective length does not match the cone dimensions")

    @classmethod
    def from_triplets(cls, c, rows, cols, vals, b, free=0, nonneg=0, psd=()) -> "ConicProgram":
        n = free + nonneg + sum(d * (d + 1) // 2 for d in psd)
        A = sp.coo_matrix((vals, (rows, cols)), shape=(len(b), n)).tocsr()
        return cls(np.asarray(c, float), A, np.asarray(b, float), free, nonneg, tuple(psd))

    @property
    def n(self) -> int:
        return self.free + self.nonneg + sum(d * (d + 1) // 2 for d in self.psd)

    @property
    def m(self) -> int:
        return len(self.b)

    def block_slices(self) -> list[slice]:
        out = []
        k = self.free + self.nonneg
        for d in self.psd:
            t = d * (d + 1) // 2
            out.append(slice(k, k + t))
            k += t
        return out

    @property
    def lp_slice(self) -> slice:
        return slice(self.free, self.free + self.nonneg)

    @property
    def free_slice(self) -> slice:
        return slice(0, self.free)

    def scaled(self, factor: float) -> "ConicProgram":
        return ConicProgram(self.c * factor, self.A.copy(), self.b.copy(), self.free, self.nonneg, self.psd)


@dataclass
class ConicSolution:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    status: str
    primal_objective: float
    dual_objective: float
    residuals: dict[str, float]
    iterations: int = 0
    history: list[dict] = field(default_factory=list, repr=False)

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


@dataclass
class CertificateReport:
    primal: float
    dual: float
    gap: float
    primal_cone: float  # most negative eigenvalue / entry of x (0 if inside)
    dual_cone: float
    certificate: float  # residual of the infeasibility certificate, when one is claimed
    ok: bool


def _min_eig_violation(prog: ConicProgram, v: np.ndarray, dual: bool) -> float:
    worst = 0.0
    if dual and prog.free:
        worst = max(worst, float(np.max(np.abs(v[prog.free_slice]))))
    if prog.nonneg:
        worst = max(worst, float(np.max(-v[prog.lp_slice], initial=0.0)))
    for d, sl in zip(prog.psd, prog.block_slices()):
        worst = max(worst, -float(np.linalg.eigvalsh(smat(v[sl], d))[0]))
    return max(worst, 0.0)


def check_certificate(prog: ConicProgram, sol: ConicSolution, tol: float = 1e-7) -> CertificateReport:
    """Recompute optimality or infeasibility residuals from the raw data."""
    A, b, c = prog.A, prog.b, prog.c
    nb, nc = np.linalg.norm(b), np.linalg.norm(c)
    if sol.status == "primal-infeasible":
        y = sol.y
        by = float(b @ y)
        s = -(A.T @ y) / by if by > 0 else np.full(prog.n, np.inf)
        cert = _min_eig_violation(prog, s, dual=True) if by > 0 else math.inf
        return CertificateReport(math.nan, math.nan, math.nan, 0.0, 0.0, cert, cert <= tol)
    if sol.status == "dual-infeasible":
        x = sol.x
        cx = float(c @ x)
        if cx >= 0:
            return CertificateReport(math.nan, math.nan, math.nan, 0.0, 0.0, math.inf, False)
        xb = x / -cx
        cert = max(float(np.linalg.norm(A @ xb)), _min_eig_violation(prog, xb, dual=False))
        return CertificateReport(math.nan, math.nan, math.nan, 0.0, 0.0, cert, cert <= tol)
    x, y, z = sol.x, sol.y, sol.z
    pobj, dobj = float(c @ x), float(b @ y)
    rp = float(np.linalg.norm(A @ x - b)) / (1.0 + nb)
    zz = z.copy()
    rd = float(np.linalg.norm(A.T @ y + zz - c)) / (1.0 + nc)
    gap = abs(pobj - dobj) / (1.0 + abs(pobj))
    pc = _min_eig_violation(prog, x, dual=False)
    dc = _min_eig_violation(prog, z, dual=True)
    ok = max(rp, rd, gap) <= tol and pc <= tol * (1 + np.abs(x).max(initial=0)) and dc <= tol * (1 + np.abs(z).max(initial=0))
    return CertificateReport(rp, rd, gap, pc, dc, 0.0, ok)


class _Blocks:
    """Cone-wise views and operations on the internal iterates."""

    def __init__(self, prog: ConicProgram, A: sp.csr_matrix):
        self.prog = prog
        self.f = prog.free
        self.l = prog.nonneg
        self.dims = prog.psd
        self.slices = prog.block_slices()
        self.lp = prog.lp_slice
        # per-block constraint rows in full-vec layout (m_k x d^2), restricted to touched rows
        A_csc = A.tocsc()
        self.block_rows: list[np.ndarray] = []
        self.block_vecA: list[sp.csr_matrix] = []
        for d, sl in zip(self.dims, self.slices):
            sub = A_csc[:, sl].tocsr()
            rows = np.unique(sub.nonzero()[0])
            sub = sub[rows]
            r, cidx, scale = _tril(d)
            # svec column k -> vec positions (r*d+c) and (c*d+r) with weight 1/scale each (diag once)
            qi, qj, qv = [], [], []
            for k in range(len(r)):
                if r[k] == cidx[k]:
                    qi.append(r[k] * d + cidx[k]); qj.append(k); qv.append(1.0)
                else:
                    w = 1.0 / SQRT2
                    qi += [r[k] * d + cidx[k], cidx[k] * d + r[k]]; qj += [k, k]; qv += [w, w]
            Q = sp.csr_matrix((qv, (qi, qj)), shape=(d * d, len(r)))
            self.block_rows.append(rows)
            self.block_vecA.append((sub @ Q.T).tocsr())
        self.A_lp = A[:, self.lp].tocsr() if self.l else None
        self.A_f = A[:, prog.free_slice].toarray() if self.f else None

    def mats(self, v: np.ndarray) -> list[np.ndarray]:
        return [smat(v[sl], d) for d, sl in zip(self.dims, self.slices)]

    def pack(self, free: np.ndarray, lp: np.ndarray, mats: Sequence[np.ndarray]) -> np.ndarray:
        parts = [free, lp] + [svec(M) for M in mats]
        return np.concatenate(parts) if parts else np.zeros(0)


def _nt_scaling(X: np.ndarray, Z: np.ndarray):
    L = np.linalg.cholesky(X)
    Lz = np.linalg.cholesky(Z)
    U, s, Vt = np.linalg.svd(Lz.T @ L)
    R = L @ Vt.T / np.sqrt(s)
    Rinv = (np.sqrt(s)[:, None] * Vt) @ sla.solve_triangular(L, np.eye(len(s)), lower=True)
    return R, Rinv, s


def _max_step(lam: np.ndarray, dtilde: np.ndarray) -> float:
    """Largest alpha with diag(lam) + alpha * dtilde PSD."""
    isq = 1.0 / np.sqrt(lam)
    T = dtilde * isq[:, None] * isq[None, :]
    emin = np.linalg.eigvalsh((T + T.T) / 2)[0]
    return math.inf if emin >= 0 else -1.0 / emin


def _lp_max_step(x: np.ndarray, dx: np.ndarray) -> float:
    neg = dx < 0
    if not np.any(neg):
        return math.inf
    return float(np.min(-x[neg] / dx[neg]))


def solve(
    prog: ConicProgram,
    tol: float = 1e-7,
    max_iter: int = 200,
    verbose: bool = False,
) -> ConicSolution:
    """Infeasible-start primal-dual interior-point method.

    Returns status ``optimal`` only when the relative primal residual, dual
    residual and duality gap (measured on the unscaled data) are all below
    ``tol``. Infeasibility is reported with a normalized certificate in ``y``
    (primal) or ``x`` (dual).
    """
    m = prog.m
    A0, b0, c0 = prog.A, prog.b, prog.c
    nb0, nc0 = float(np.linalg.norm(b0)), float(np.linalg.norm(c0))

    # row equilibration and scalar normalization of b and c
    rownorm = np.sqrt(np.asarray(A0.multiply(A0).sum(axis=1)).ravel())
    rownorm[rownorm == 0] = 1.0
    Dr = 1.0 / rownorm
    A = sp.diags(Dr) @ A0
    A = A.tocsr()
    bscale = max(1.0, float(np.abs(Dr * b0).max(initial=0.0)))
    cscale = max(1.0, float(np.abs(c0).max(initial=0.0)))
    b = Dr * b0 / bscale
    c = c0 / cscale

    blk = _Blocks(prog, A)
    f, l, dims = blk.f, blk.l, blk.dims
    nu = l + sum(dims)
    AT = A.T.tocsr()

    # identity-based strictly feasible cone start
    x_f = np.zeros(f)
    x_l = np.ones(l)
    z_l = np.ones(l)
    X = [np.eye(d) for d in dims]
    Z = [np.eye(d) for d in dims]
    xi = max(10.0, float(np.abs(b).max(initial=0.0)))
    eta = max(10.0, float(np.abs(c).max(initial=0.0)) * 10.0)
    x_l *= xi
    z_l *= eta
    X = [xi * M for M in X]
    Z = [eta * M for M in Z]
    y = np.zeros(m)

    def pack(xf, xl, Ms):
        return blk.pack(xf, xl, Ms)

    def orig_measures(x, y, z):
        xo = x * bscale
        yo = Dr * y * cscale
        zo = z * cscale
        pobj = float(c0 @ xo)
        dobj = float(b0 @ yo)
        rp = float(np.linalg.norm(A0 @ xo - b0)) / (1.0 + nb0)
        rd = float(np.linalg.norm(A0.T @ yo + zo - c0)) / (1.0 + nc0)
        gap = abs(pobj - dobj) / (1.0 + abs(pobj))
        return xo, yo, zo, pobj, dobj, rp, rd, gap

    status = "max-iter"
    history: list[dict] = []
    it = 0
    best = None
    for it in range(1, max_iter + 1):
        x = pack(x_f, x_l, X)
        z = pack(np.zeros(f), z_l, Z)
        xo, yo, zo, pobj, dobj, rp_rel, rd_rel, gap_rel = orig_measures(x, y, z)
        mu = (float(x_l @ z_l) + sum(float(np.sum(Xk * Zk)) for Xk, Zk in zip(X, Z))) / max(nu, 1)
        history.append(dict(it=it, pobj=pobj, dobj=dobj, rp=rp_rel, rd=rd_rel, gap=gap_rel, mu=mu))
        if verbose:
            log.info("%3d pobj %+.8e dobj %+.8e rp %.1e rd %.1e gap %.1e", it, pobj, dobj, rp_rel, rd_rel, gap_rel)
        if max(rp_rel, rd_rel, gap_rel) <= tol:
            status = "optimal"
            break
        score = max(rp_rel, rd_rel, gap_rel)
        if best is None or score < best[0]:
            best = (score, xo, yo, zo, pobj, dobj, rp_rel, rd_rel, gap_rel)

        # infeasibility detection on normalized rays
        by = float(b0 @ yo)
        if by > 0:
            cert = float(np.linalg.norm(A0.T @ yo + zo)) / by
            if cert <= tol and rp_rel > tol:
                s = -(A0.T @ (yo / by))
                if _min_eig_violation(prog, s, dual=True) <= tol:
                    status = "primal-infeasible"
                    return ConicSolution(xo, yo / by, zo / by, status, pobj, dobj,
                                         dict(primal=rp_rel, dual=rd_rel, gap=gap_rel, certificate=cert), it, history)
        cx = float(c0 @ xo)
        if cx < 0:
            cert = float(np.linalg.norm(A0 @ xo)) / -cx
            if cert <= tol and rd_rel > tol:
                xr = xo / -cx
                if _min_eig_violation(prog, xr, dual=False) <= tol:
                    status = "dual-infeasible"
                    return ConicSolution(xr, yo, zo, status, pobj, dobj,
                                         dict(primal=rp_rel, dual=rd_rel, gap=gap_rel, certificate=cert), it, history)

        rp = b - A @ x
        rd = c - AT @ y - z
        rd_f = rd[:f]
        rd_l = rd[blk.lp]
        rd_K = blk.mats(rd)

        try:
            scal = [_nt_scaling(Xk, Zk) for Xk, Zk in zip(X, Z)]
        except np.linalg.LinAlgError:
            status = "numerical-failure"
            break
        d_l = x_l / z_l
        lam_l = np.sqrt(x_l * z_l)

        # Schur complement
        M = np.zeros((m, m))
        if l:
            Al = blk.A_lp
            M += (Al @ sp.diags(d_l) @ Al.T).toarray()
        for k, (R, _, _) in enumerate(scal):
            rows, Av = blk.block_rows[k], blk.block_vecA[k]
            if len(rows) == 0:
                continue
            d = dims[k]
            # rows of T are vec(R' A_i R); the block contribution is the Gram matrix T T'
            if d <= 64:
                T = np.asarray(Av @ np.kron(R, R))
            else:
                T = np.empty((len(rows), d * d))
                for r in range(len(rows)):
                    Ar = Av[r].toarray().reshape(d, d)
                    T[r] = (R.T @ Ar @ R).ravel()
            M[np.ix_(rows, rows)] += T @ T.T
        M = (M + M.T) / 2

        try:
            factor = _factor(M, blk.A_f)
        except np.linalg.LinAlgError:
            status = "numerical-failure"
            break

        def direction(rc_l, rc_K):
            # rc_*: complementarity right-hand side in scaled coordinates
            g_l = np.sqrt(d_l) * (rc_l / lam_l) if l else np.zeros(0)
            g_K, G_K = [], []
            for (R, Rinv, lam), rc in zip(scal, rc_K):
                G = 2.0 * rc / (lam[:, None] + lam[None, :])
                G_K.append(G)
                g_K.append(R @ G @ R.T)
            t_l = g_l - d_l * rd_l
            t_K = [R @ (G - R.T @ rk @ R) @ R.T for (R, _, _), G, rk in zip(scal, G_K, rd_K)]
            t = pack(np.zeros(f), t_l, t_K)
            rhs = rp - A @ t
            dy, dxf = _solve(factor, rhs, rd_f)

            def expand(dy, dxf):
                dz = rd - AT @ dy
                dz[:f] = 0.0
                dz_l = dz[blk.lp]
                dz_K = blk.mats(dz)
                dx_l = g_l - d_l * dz_l
                dx_K = [R @ (G - R.T @ dzk @ R) @ R.T for (R, _, _), G, dzk in zip(scal, G_K, dz_K)]
                res = rp - A @ pack(dxf, dx_l, dx_K)
                res_f = rd_f - (blk.A_f.T @ dy if f else np.zeros(0))
                err = float(np.linalg.norm(res)) + float(np.linalg.norm(res_f))
                return (dxf, dx_l, dx_K, dy, dz_l, dz_K), res, res_f, err

            # iterative refinement of the primal equation A dx = rp, keeping the best iterate
            best_dir, res, res_f, err = expand(dy, dxf)
            floor = 1e-15 * (1.0 + float(np.linalg.norm(rp)))
            for _ in range(4):
                if err <= floor:
                    break
                ddy, ddxf = _solve(factor, res, res_f)
                dy, dxf = best_dir[3] + ddy, best_dir[0] + ddxf
                cand, r2, r2f, e2 = expand(dy, dxf)
                if not e2 < 0.5 * err:
                    if e2 < err:
                        best_dir, err = cand, e2
                    break
                best_dir, res, res_f, err = cand, r2, r2f, e2
            return best_dir

        def steps(dx_l, dx_K, dz_l, dz_K):
            ap = _lp_max_step(x_l, dx_l) if l else math.inf
            ad = _lp_max_step(z_l, dz_l) if l else math.inf
            for (R, Rinv, lam), dxk, dzk in zip(scal, dx_K, dz_K):
                ap = min(ap, _max_step(lam, Rinv @ dxk @ Rinv.T))
                ad = min(ad, _max_step(lam, R.T @ dzk @ R))
            return ap, ad

        # predictor
        rc_l = -lam_l**2
        rc_K = [-np.diag(lam**2) for (_, _, lam) in scal]
        try:
            dxf_a, dxl_a, dxK_a, dy_a, dzl_a, dzK_a = direction(rc_l, rc_K)
        except np.linalg.LinAlgError:
            status = "numerical-failure"
            break
        ap, ad = steps(dxl_a, dxK_a, dzl_a, dzK_a)
        ap, ad = min(1.0, ap), min(1.0, ad)
        mu_aff = float((x_l + ap * dxl_a) @ (z_l + ad * dzl_a)) if l else 0.0
        mu_aff += sum(float(np.sum((Xk + ap * dX) * (Zk + ad * dZ))) for Xk, Zk, dX, dZ in zip(X, Z, dxK_a, dzK_a))
        mu_aff /= max(nu, 1)
        expon = max(1.0, 3.0 * min(ap, ad) ** 2)
        sigma = min(1.0, max(0.0, (mu_aff / mu) ** expon)) if mu > 0 else 0.0
        step_pred = min(ap, ad)

        # corrector
        rc_l = sigma * mu - lam_l**2 - (dxl_a / np.sqrt(d_l)) * (dzl_a * np.sqrt(d_l)) if l else np.zeros(0)
        rc_K = []
        for (R, Rinv, lam), dX, dZ in zip(scal, dxK_a, dzK_a):
            dxt = Rinv @ dX @ Rinv.T
            dzt = R.T @ dZ @ R
            jp = (dxt @ dzt + dzt @ dxt) / 2
            rc_K.append(sigma * mu * np.eye(len(lam)) - np.diag(lam**2) - jp)
        try:
            dxf, dxl, dxK, dy, dzl, dzK = direction(rc_l, rc_K)
        except np.linalg.LinAlgError:
            status = "numerical-failure"
            break
        ap, ad = steps(dxl, dxK, dzl, dzK)
        gamma = 0.9 + 0.09 * step_pred
        ap = min(1.0, gamma * ap)
        ad = min(1.0, gamma * ad)
        if ap < 1e-10 and ad < 1e-10:
            status = "numerical-failure"
            break

        history[-1].update(ap=ap, ad=ad, sigma=sigma)
        x_f = x_f + ap * dxf
        x_l = x_l + ap * dxl
        X = [Xk + ap * dX for Xk, dX in zip(X, dxK)]
        y = y + ad * dy
        z_l = z_l + ad * dzl
        Z = [Zk + ad * dZ for Zk, dZ in zip(Z, dzK)]
        X = [(Xk + Xk.T) / 2 for Xk in X]
        Z = [(Zk + Zk.T) / 2 for Zk in Z]
    else:
        it = max_iter

    if status == "optimal":
        return ConicSolution(xo, yo, zo, status, pobj, dobj, dict(primal=rp_rel, dual=rd_rel, gap=gap_rel), it, history)
    if best is not None:
        _, xo, yo, zo, pobj, dobj, rp_rel, rd_rel, gap_rel = best
    return ConicSolution(xo, yo, zo, status, pobj, dobj, dict(primal=rp_rel, dual=rd_rel, gap=gap_rel), it, history)


def _factor(M: np.ndarray, A_f: np.ndarray | None):
    if A_f is None or A_f.shape[1] == 0:
        try:
            return ("chol", sla.cho_factor(M, lower=True, check_finite=False))
        except np.linalg.LinAlgError:
            pass
        # numerically singular: solve on the well-conditioned eigenspace only
        d = np.sqrt(np.maximum(np.diag(M), 1e-300))
        w, V = np.linalg.eigh(M / d[:, None] / d[None, :])
        keep = w > 1e-13 * w[-1]
        return ("eig", d, w[keep], V[:, keep])
    f = A_f.shape[1]
    K = np.block([[M, A_f], [A_f.T, np.zeros((f, f))]])
    return ("lu", sla.lu_factor(K, check_finite=False), f)


def _solve(factor, r1: np.ndarray, r2: np.ndarray):
    kind = factor[0]
    if kind == "chol":
        return sla.cho_solve(factor[1], r1, check_finite=False), np.zeros(0)
    if kind == "eig":
        _, d, w, V = factor
        return (V @ ((V.T @ (r1 / d)) / w)) / d, np.zeros(0)
    f = factor[2]
    sol = sla.lu_solve(factor[1], np.concatenate([r1, r2]), check_finite=False)
    if not np.all(np.isfinite(sol)):
        raise np.linalg.LinAlgError("singular KKT system")
    m = len(r1)
    return sol[:m], sol[m:m + f]
