"""ROPF problem model: variants, branch flows, candidate evaluation, gaps.

Voltages are handled in rectangular coordinates. Bus ``k`` (position in
``Network.buses``) owns real coordinates ``2k`` (real part) and ``2k+1``
(imaginary part); all power and current expressions are real quadratic forms
in that vector, built once by :func:`quadratic_forms` and shared by the local
solver and the semidefinite relaxation.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field
from typing import Literal, Mapping, Union

import numpy as np

from ropf.matpower import Branch, Generator, Network

__all__ = [
    "MaxKShunts",
    "MaxKMoves",
    "GenMoves",
    "RopfProblem",
    "Candidate",
    "FlowCoeffs",
    "FeasibilityReport",
    "branch_flow_coeffs",
    "evaluate_candidate",
    "genmoves_active_power",
    "genmoves_affine",
    "relative_gap",
    "is_solved",
    "SOLVED_GAP",
    "QuadForms",
    "NetworkForms",
    "quadratic_forms",
]

SOLVED_GAP = 1e-4


@dataclass(frozen=True)
class MaxKShunts:
    k: int

    def __post_init__(self) -> None:
        if self.k < 0:
            raise ValueError("k must be nonnegative")


@dataclass(frozen=True)
class MaxKMoves:
    k: int
    u0: Mapping[int, int]

    def __post_init__(self) -> None:
        if self.k < 0:
            raise ValueError("k must be nonnegative")
        if any(v not in (0, 1) for v in self.u0.values()):
            raise ValueError("u0 must be binary")


@dataclass(frozen=True)
class GenMoves:
    P0: Mapping[int, float]
    direction: Literal["up", "down", "both"] = "both"

    def __post_init__(self) -> None:
        if self.direction not in ("up", "down", "both"):
            raise ValueError(f"bad direction {self.direction!r}")


Variant = Union[MaxKShunts, MaxKMoves, GenMoves]


@dataclass(frozen=True)
class RopfProblem:
    net: Network
    variant: Variant

    def __post_init__(self) -> None:
        shunts = set(self.net.shunt_buses)
        v = self.variant
        if isinstance(v, MaxKMoves) and set(v.u0) != shunts:
            raise ValueError("u0 must be defined exactly on the shunt buses")
        if isinstance(v, GenMoves):
            if set(v.P0) != set(self.net.generators):
                raise ValueError("P0 must be defined exactly on the generator buses")
            for bus, p0 in v.P0.items():
                g = self.net.generators[bus]
                if not g.pmin - 1e-12 <= p0 <= g.pmax + 1e-12:
                    raise ValueError(f"P0 at bus {bus} outside [Pmin, Pmax]")

    @property
    def shunts(self) -> list[int]:
        return self.net.shunt_buses

    def with_direction(self, direction: str) -> "RopfProblem":
        if not isinstance(self.variant, GenMoves):
            raise TypeError("direction only applies to GENmoves")
        return RopfProblem(self.net, GenMoves(dict(self.variant.P0), direction))

    def objective(self, S: Mapping[int, complex]) -> float:
        return sum(g.cost * S[b].real + g.const for b, g in self.net.generators.items())


@dataclass
class Candidate:
    """A full assignment of the ROPF variables."""

    v: dict[int, complex]
    S: dict[int, complex]
    u: dict[int, float]
    objective: float = math.nan
    lambda_plus: float | None = None
    lambda_minus: float | None = None
    delta_plus: int | None = None
    delta_minus: int | None = None

    def to_json(self) -> dict:
        return {
            "v": {str(k): [z.real, z.imag] for k, z in self.v.items()},
            "S": {str(k): [z.real, z.imag] for k, z in self.S.items()},
            "u": {str(k): x for k, x in self.u.items()},
            "objective": self.objective,
            "lambda_plus": self.lambda_plus,
            "lambda_minus": self.lambda_minus,
            "delta_plus": self.delta_plus,
            "delta_minus": self.delta_minus,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Candidate":
        return cls(
            v={int(k): complex(*z) for k, z in d["v"].items()},
            S={int(k): complex(*z) for k, z in d["S"].items()},
            u={int(k): float(x) for k, x in d["u"].items()},
            objective=d["objective"],
            lambda_plus=d.get("lambda_plus"),
            lambda_minus=d.get("lambda_minus"),
            delta_plus=d.get("delta_plus"),
            delta_minus=d.get("delta_minus"),
        )


@dataclass(frozen=True)
class FlowCoeffs:
    """Coefficient pairs of the four branch-end expressions.

    ``S_orig = so[0]*|v_o|^2 + so[1]*v_o*conj(v_d)``
    ``S_dest = sd[0]*conj(v_o)*v_d + sd[1]*|v_d|^2``
    ``i_orig = io[0]*v_o + io[1]*v_d``
    ``i_dest = id[0]*v_o + id[1]*v_d``
    """

    so: tuple[complex, complex]
    sd: tuple[complex, complex]
    io: tuple[complex, complex]
    id: tuple[complex, complex]

    def s_orig(self, vo: complex, vd: complex) -> complex:
        return self.so[0] * abs(vo) ** 2 + self.so[1] * vo * vd.conjugate()

    def s_dest(self, vo: complex, vd: complex) -> complex:
        return self.sd[0] * vo.conjugate() * vd + self.sd[1] * abs(vd) ** 2

    def i_orig(self, vo: complex, vd: complex) -> complex:
        return self.io[0] * vo + self.io[1] * vd

    def i_dest(self, vo: complex, vd: complex) -> complex:
        return self.id[0] * vo + self.id[1] * vd


def branch_flow_coeffs(br: Branch) -> FlowCoeffs:
    """Closed-form flow coefficients of a branch (pi model, tap at the origin).

    Currents use the series admittance ``y`` itself (not its conjugate) so that
    ``S = v * conj(i)`` holds at both ends.
    """
    if br.tau <= 0:
        raise ValueError("tau must be positive")
    y, b, tau = br.y, br.b, br.tau
    yc = y.conjugate()
    rot = cmath.exp(1j * br.theta)
    so = ((yc - 1j * b) / tau**2, -yc * rot / tau)
    sd = (-yc * rot.conjugate() / tau, yc - 1j * b)
    io = ((y + 1j * b) / tau**2, -y * rot.conjugate() / tau)
    id_ = (-y * rot / tau, y + 1j * b)
    return FlowCoeffs(so, sd, io, id_)


@dataclass
class FeasibilityReport:
    violations: dict[str, float]
    objective: float
    tol: float
    balance_residual: dict[int, complex] = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return all(v <= self.tol for v in self.violations.values())

    @property
    def max_violation(self) -> float:
        return max(self.violations.values(), default=0.0)


def genmoves_affine(g: Generator, p0: float, direction: str) -> tuple[float, float]:
    """``(a, b)`` with active power ``a + b*lambda`` for the given direction."""
    if direction == "down":
        return g.pmin, 2.0 * (p0 - g.pmin)
    if direction == "up":
        return 2.0 * p0 - g.pmax, 2.0 * (g.pmax - p0)
    raise ValueError(f"bad direction {direction!r}")


def genmoves_active_power(
    g: Generator, p0: float, lambda_minus: float, lambda_plus: float, delta_minus: int, delta_plus: int
) -> float:
    """Active power of a generator under uniform redispatch around ``p0``."""
    if delta_minus + delta_plus != 1 or {delta_minus, delta_plus} != {0, 1}:
        raise ValueError("exactly one of delta_minus, delta_plus must be 1")
    if not 0.0 <= lambda_minus <= 0.5:
        raise ValueError("lambda_minus must lie in [0, 0.5]")
    if not 0.5 <= lambda_plus <= 1.0:
        raise ValueError("lambda_plus must lie in [0.5, 1]")
    down = g.pmin + 2.0 * (p0 - g.pmin) * lambda_minus
    up = 2.0 * p0 - g.pmax + 2.0 * (g.pmax - p0) * lambda_plus
    return down * delta_minus + up * delta_plus


def variant_violation(p: RopfProblem, c: Candidate) -> float:
    v = p.variant
    if isinstance(v, MaxKShunts):
        return max(0.0, sum(c.u.values()) - v.k)
    if isinstance(v, MaxKMoves):
        moves = sum(c.u[s] if v.u0[s] == 0 else 1.0 - c.u[s] for s in p.shunts)
        return max(0.0, moves - v.k)
    if c.delta_plus is None or c.delta_minus is None:
        raise ValueError("GENmoves candidate needs delta_plus and delta_minus")
    lam_m = c.lambda_minus if c.lambda_minus is not None else 0.5
    lam_p = c.lambda_plus if c.lambda_plus is not None else 0.5
    worst = max(0.0, -lam_m, lam_m - 0.5, 0.5 - lam_p, lam_p - 1.0)
    lam_m = min(max(lam_m, 0.0), 0.5)
    lam_p = min(max(lam_p, 0.5), 1.0)
    for bus, g in p.net.generators.items():
        target = genmoves_active_power(g, v.P0[bus], lam_m, lam_p, c.delta_minus, c.delta_plus)
        worst = max(worst, abs(c.S[bus].real - target))
    return worst


def evaluate_candidate(p: RopfProblem, c: Candidate, tol: float = 1e-6) -> FeasibilityReport:
    """Maximum violation of every constraint family, in complex arithmetic."""
    net = p.net
    missing = [b for b in net.buses if b not in c.v]
    if missing:
        raise ValueError(f"candidate lacks voltages at buses {missing[:5]}")
    if set(c.u) != set(p.shunts):
        raise ValueError("candidate u must be defined exactly on the shunt buses")
    if set(c.S) != set(net.generators):
        raise ValueError("candidate S must be defined exactly on the generator buses")

    flow_out = {b: 0j for b in net.buses}
    cur = 0.0
    for br in net.branches:
        fc = branch_flow_coeffs(br)
        vo, vd = c.v[br.orig], c.v[br.dest]
        flow_out[br.orig] += fc.s_orig(vo, vd)
        flow_out[br.dest] += fc.s_dest(vo, vd)
        if math.isfinite(br.imax):
            lim = br.imax**2
            cur = max(cur, abs(fc.i_orig(vo, vd)) ** 2 - lim, abs(fc.i_dest(vo, vd)) ** 2 - lim)

    resid: dict[int, complex] = {}
    vb = 0.0
    for bid, bus in net.buses.items():
        m2 = abs(c.v[bid]) ** 2
        vb = max(vb, bus.vmin**2 - m2, m2 - bus.vmax**2)
        shunt = 0j
        if bus.shunt is not None:
            shunt = bus.shunt.conjugate() * m2 * c.u[bid]
        resid[bid] = c.S.get(bid, 0j) - bus.load - shunt - flow_out[bid]

    pb = qb = 0.0
    genmoves = isinstance(p.variant, GenMoves)
    for bid, g in net.generators.items():
        s = c.S[bid]
        if not genmoves:
            pb = max(pb, g.pmin - s.real, s.real - g.pmax)
        qb = max(qb, g.qmin - s.imag, s.imag - g.qmax)

    ub = max((max(-x, x - 1.0) for x in c.u.values()), default=0.0)
    violations = {
        "balance": max(abs(r) for r in resid.values()),
        "p_bounds": max(pb, 0.0),
        "q_bounds": max(qb, 0.0),
        "v_bounds": max(vb, 0.0),
        "current": max(cur, 0.0),
        "variant": max(variant_violation(p, c), ub, 0.0),
    }
    return FeasibilityReport(violations, p.objective(c.S), tol, resid)


def relative_gap(ub: float, lb: float) -> float:
    """``(ub - lb) / ub``; NaN when the upper bound is infinite or zero."""
    if not math.isfinite(ub) or ub == 0.0 or not math.isfinite(lb):
        return math.nan
    return (ub - lb) / ub


def is_solved(ub: float, lb: float, tol: float = SOLVED_GAP) -> bool:
    g = relative_gap(ub, lb)
    return not math.isnan(g) and g <= tol


class QuadForms:
    """A stack of real quadratic forms ``f_r(x) = sum c * x_i * x_j``.

    Terms are kept canonical (``i <= j``, duplicates summed, zeros dropped).
    """

    def __init__(self, nrows: int, row, i, j, c):
        row, i, j, c = (np.asarray(a) for a in (row, i, j, c))
        lo, hi = np.minimum(i, j), np.maximum(i, j)
        if len(c):
            key = np.stack([row, lo, hi], axis=1)
            uniq, inv = np.unique(key, axis=0, return_inverse=True)
            summed = np.bincount(inv.ravel(), weights=c, minlength=len(uniq))
            keep = summed != 0.0
            uniq, summed = uniq[keep], summed[keep]
        else:
            uniq, summed = np.zeros((0, 3), dtype=int), np.zeros(0)
        self.nrows = nrows
        self.row = uniq[:, 0].astype(np.int64)
        self.i = uniq[:, 1].astype(np.int64)
        self.j = uniq[:, 2].astype(np.int64)
        self.c = summed.astype(float)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.bincount(self.row, weights=self.c * x[self.i] * x[self.j], minlength=self.nrows)

    def terms(self, r: int) -> list[tuple[int, int, float]]:
        sel = self.row == r
        return list(zip(self.i[sel].tolist(), self.j[sel].tolist(), self.c[sel].tolist()))


def _bilinear(alpha: complex, a: int, b: int):
    """Real/imag monomials of ``alpha * v_a * conj(v_b)`` (bus positions)."""
    p, q = alpha.real, alpha.imag
    ea, fa, eb, fb = 2 * a, 2 * a + 1, 2 * b, 2 * b + 1
    re = [(ea, eb, p), (fa, fb, p), (fa, eb, -q), (ea, fb, q)]
    im = [(ea, eb, q), (fa, fb, q), (fa, eb, p), (ea, fb, -p)]
    return re, im


@dataclass
class NetworkForms:
    """Quadratic forms of a network in the real voltage coordinates.

    ``p_inj``/``q_inj``: net branch outflow at each bus (rows = bus positions);
    ``vmag``: squared voltage magnitude per bus; ``current``: squared current
    magnitude at both ends of every limited branch, with ``current_rows``
    mapping each row to ``(branch index, end)`` and ``current_limits`` the
    squared limits.
    """

    p_inj: QuadForms
    q_inj: QuadForms
    vmag: QuadForms
    current: QuadForms
    current_rows: list[tuple[int, str]]
    current_limits: np.ndarray


def branch_injection_terms(net: Network) -> list[tuple[int, list, list]]:
    """Per branch end: ``(bus position, P terms, Q terms)`` of the flow leaving that bus.

    Summing the groups of a bus gives the rows of ``p_inj`` and ``q_inj``.
    """
    idx = net.bus_index
    out = []
    for br in net.branches:
        o, d = idx[br.orig], idx[br.dest]
        fc = branch_flow_coeffs(br)
        for bus, pairs in ((o, ((fc.so[0], o, o), (fc.so[1], o, d))), (d, ((fc.sd[0], d, o), (fc.sd[1], d, d)))):
            pt, qt = [], []
            for alpha, a, b in pairs:
                re, im = _bilinear(alpha, a, b)
                pt += re
                qt += im
            out.append((bus, pt, qt))
    return out


def quadratic_forms(net: Network) -> NetworkForms:
    idx = net.bus_index
    P: list[tuple[int, int, int, float]] = []
    Q: list[tuple[int, int, int, float]] = []
    I: list[tuple[int, int, int, float]] = []
    rows: list[tuple[int, str]] = []
    limits: list[float] = []

    def put(dst, row, terms):
        dst.extend((row, i, j, c) for i, j, c in terms)

    for bus, pt, qt in branch_injection_terms(net):
        put(P, bus, pt)
        put(Q, bus, qt)
    for li, br in enumerate(net.branches):
        o, d = idx[br.orig], idx[br.dest]
        fc = branch_flow_coeffs(br)
        if math.isfinite(br.imax):
            for end, (ca, cb) in (("orig", fc.io), ("dest", fc.id)):
                r = len(rows)
                terms = []
                terms += _bilinear(abs(ca) ** 2, o, o)[0]
                terms += _bilinear(abs(cb) ** 2, d, d)[0]
                terms += _bilinear(2.0 * ca * cb.conjugate(), o, d)[0]
                put(I, r, terms)
                rows.append((li, end))
                limits.append(br.imax**2)

    n = net.n
    V = [(k, 2 * k, 2 * k, 1.0) for k in range(n)] + [(k, 2 * k + 1, 2 * k + 1, 1.0) for k in range(n)]

    def mk(nrows, data):
        if not data:
            return QuadForms(nrows, [], [], [], [])
        r, i, j, c = zip(*data)
        return QuadForms(nrows, r, i, j, c)

    return NetworkForms(mk(n, P), mk(n, Q), mk(n, V), mk(len(rows), I), rows, np.asarray(limits, dtype=float))
