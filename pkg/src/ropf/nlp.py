"""Small primal-dual interior-point solver for sparse polynomial NLPs.

Problems have the form::

    minimize f(z)  subject to  h(z) = 0,  g(z) <= 0

where every function is a sum of monomials of degree at most three. This
covers the AC power-flow equations in rectangular coordinates including the
``u * |v|^2`` shunt terms.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.linalg as sla

log = logging.getLogger(__name__)


class PolySystem:
    """Rows ``r(z) = sum_m c_m * z[a_m] * z[b_m] * z[c_m]`` (missing factors = -1)."""

    def __init__(self, nrows: int, nvars: int, row=(), idx=(), coef=()):
        self.nrows = nrows
        self.nvars = nvars
        self.row = np.asarray(row, dtype=np.int64).reshape(-1)
        idx = np.asarray(idx, dtype=np.int64).reshape(-1, 3)
        # missing factors point at an appended constant 1
        self.idx = np.where(idx < 0, nvars, idx)
        self.coef = np.asarray(coef, dtype=float).reshape(-1)
        self._present = self.idx < nvars

    @classmethod
    def build(cls, nrows: int, nvars: int, terms: list[tuple]) -> "PolySystem":
        """``terms``: ``(row, coef, *vars)`` with up to three variable indices."""
        if not terms:
            return cls(nrows, nvars)
        row = [t[0] for t in terms]
        coef = [t[1] for t in terms]
        idx = [list(t[2:]) + [-1] * (3 - len(t[2:])) for t in terms]
        return cls(nrows, nvars, row, idx, coef)

    def _ext(self, z: np.ndarray) -> np.ndarray:
        return np.append(z, 1.0)

    def __call__(self, z: np.ndarray) -> np.ndarray:
        ze = self._ext(z)
        vals = self.coef * ze[self.idx[:, 0]] * ze[self.idx[:, 1]] * ze[self.idx[:, 2]]
        return np.bincount(self.row, weights=vals, minlength=self.nrows)

    def jacobian(self, z: np.ndarray) -> sp.csr_matrix:
        ze = self._ext(z)
        f = ze[self.idx]
        rr, cc, vv = [], [], []
        for p in range(3):
            q, r = [k for k in range(3) if k != p]
            m = self._present[:, p]
            rr.append(self.row[m])
            cc.append(self.idx[m, p])
            vv.append(self.coef[m] * f[m, q] * f[m, r])
        return sp.csr_matrix(
            (np.concatenate(vv), (np.concatenate(rr), np.concatenate(cc))), shape=(self.nrows, self.nvars)
        )

    def hessian(self, z: np.ndarray, w: np.ndarray) -> sp.csr_matrix:
        """Hessian of ``sum_r w_r * row_r(z)``."""
        ze = self._ext(z)
        f = ze[self.idx]
        cw = self.coef * w[self.row]
        rr, cc, vv = [], [], []
        for p in range(3):
            for q in range(3):
                if p == q:
                    continue
                r = 3 - p - q
                m = self._present[:, p] & self._present[:, q]
                rr.append(self.idx[m, p])
                cc.append(self.idx[m, q])
                vv.append(cw[m] * f[m, r])
        return sp.csr_matrix(
            (np.concatenate(vv), (np.concatenate(rr), np.concatenate(cc))), shape=(self.nvars, self.nvars)
        )


def _inertia(d: np.ndarray) -> tuple[int, int, int]:
    """Signs of the eigenvalues of the block-diagonal LDL factor."""
    pos = neg = zero = 0
    n = d.shape[0]
    k = 0
    while k < n:
        if k + 1 < n and d[k + 1, k] != 0.0:
            ev = np.linalg.eigvalsh(d[k:k + 2, k:k + 2])
            k += 2
        else:
            ev = [d[k, k]]
            k += 1
        for e in ev:
            if e > 1e-13:
                pos += 1
            elif e < -1e-13:
                neg += 1
            else:
                zero += 1
    return pos, neg, zero


def _ldl_solve(lu, d, perm, b):
    T = lu[perm]
    y = sla.solve_triangular(T, b[perm], lower=True, unit_diagonal=True, check_finite=False)
    w = np.empty_like(y)
    n = len(y)
    k = 0
    while k < n:
        if k + 1 < n and d[k + 1, k] != 0.0:
            w[k:k + 2] = np.linalg.solve(d[k:k + 2, k:k + 2], y[k:k + 2])
            k += 2
        else:
            w[k] = y[k] / d[k, k]
            k += 1
    x = np.empty_like(w)
    x[perm] = sla.solve_triangular(T.T, w, lower=False, unit_diagonal=True, check_finite=False)
    return x


def _newton_step(M, Jh, N, hz, delta_last: float):
    """Solve the KKT system, shifting the Hessian until the inertia is correct."""
    n, neq = M.shape[0], Jh.shape[0]
    Md = M.toarray()
    Jd = Jh.toarray()
    rhs = np.concatenate([-N, -hz])
    dc = 1e-10 if neq else 0.0
    delta = 0.0
    for attempt in range(40):
        K = np.block([[Md + delta * np.eye(n), Jd.T], [Jd, -dc * np.eye(neq)]])
        try:
            lu, d, perm = sla.ldl(K, lower=True, check_finite=False)
        except (ValueError, np.linalg.LinAlgError):
            lu = None
        if lu is not None:
            pos, neg, zero = _inertia(d)
            if pos == n and neg == neq and zero == 0:
                sol = _ldl_solve(lu, d, perm, rhs)
                if np.all(np.isfinite(sol)):
                    return sol, delta
        if delta == 0.0:
            delta = 1e-4 if delta_last == 0.0 else max(1e-20, delta_last / 3)
        else:
            delta *= 8 if delta_last == 0.0 else 10
        if delta > 1e40:
            break
    return None, delta_last


@dataclass
class NlpProblem:
    f: PolySystem  # one row
    h: PolySystem
    g: PolySystem

    @property
    def n(self) -> int:
        return self.f.nvars


@dataclass
class NlpSolution:
    z: np.ndarray
    converged: bool
    iterations: int
    objective: float
    feas: float  # max(|h|_inf, max(g, 0))
    lam: np.ndarray
    mu: np.ndarray
    message: str = ""


def solve_nlp(
    prob: NlpProblem,
    z0: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 150,
    step_ratio: float = 0.99995,
    sigma: float = 0.1,
) -> NlpSolution:
    """Primal-dual interior point with slack variables for ``g``.

    Newton steps on the reduced KKT system; the Hessian block is shifted
    until the factorization shows the inertia of a local minimizer.
    """
    z = np.array(z0, dtype=float)
    n = len(z)
    neq, niq = prob.h.nrows, prob.g.nrows
    hz, gz = prob.h(z), prob.g(z)
    s = np.ones(niq)
    big = gz < -1.0
    s[big] = -gz[big]
    mu = np.ones(niq) / s
    lam = np.zeros(neq)
    gamma = 1.0
    fz = float(prob.f(z)[0])
    one = np.ones(1)
    delta = 0.0
    converged = False
    it = 0
    msg = ""
    for it in range(1, max_iter + 1):
        df = np.asarray(prob.f.jacobian(z).todense()).ravel()
        Jh = prob.h.jacobian(z)
        Jg = prob.g.jacobian(z)
        Lz = df + Jh.T @ lam + Jg.T @ mu
        feas = max(np.max(np.abs(hz), initial=0.0), np.max(gz, initial=0.0))
        zn = max(np.max(np.abs(z), initial=0.0), 1.0)
        feascond = feas / (1.0 + zn)
        gradcond = np.max(np.abs(Lz), initial=0.0) / (1.0 + max(np.max(np.abs(lam), initial=0.0), np.max(mu, initial=0.0)))
        compcond = float(s @ mu) / (1.0 + zn)
        if feascond < tol and gradcond < tol and compcond < tol:
            converged = True
            break

        H = prob.f.hessian(z, one) + prob.h.hessian(z, lam) + prob.g.hessian(z, mu)
        D = mu / s
        M = H + Jg.T @ sp.diags(D) @ Jg
        N = Lz + Jg.T @ ((gamma + mu * gz) / s)
        step, delta = _newton_step(M, Jh, N, hz, delta)
        if step is None:
            msg = "singular KKT system"
            break
        dz, dlam = step[:n], step[n:]
        ds = -gz - s - Jg @ dz
        dmu = -mu + (gamma - mu * ds) / s

        ap = 1.0
        neg = ds < 0
        if np.any(neg):
            ap = min(1.0, step_ratio * float(np.min(-s[neg] / ds[neg])))
        ad = 1.0
        neg = dmu < 0
        if np.any(neg):
            ad = min(1.0, step_ratio * float(np.min(-mu[neg] / dmu[neg])))

        z = z + ap * dz
        s = s + ap * ds
        lam = lam + ad * dlam
        mu = mu + ad * dmu
        if niq:
            gamma = sigma * float(s @ mu) / niq
        hz, gz = prob.h(z), prob.g(z)
        fz = float(prob.f(z)[0])
        if not np.isfinite(fz) or not np.all(np.isfinite(z)):
            msg = "diverged"
            break
    hz, gz = prob.h(z), prob.g(z)
    feas = max(float(np.max(np.abs(hz), initial=0.0)), float(np.max(gz, initial=0.0)))
    return NlpSolution(z, converged, it, float(prob.f(z)[0]), feas, lam, mu, msg)
