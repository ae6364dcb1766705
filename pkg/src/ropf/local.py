"""Upper bounds from local solves of the ROPF problem.

The nonlinear model is written in rectangular voltage coordinates and solved
by :mod:`ropf.nlp`. On top of the fixed-binary solve sit the three-step
heuristic (continuous relaxation, complementarity penalty, fix and resolve)
and the rounding baseline.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .matpower import Network
from .network import (
    Candidate,
    GenMoves,
    MaxKMoves,
    MaxKShunts,
    RopfProblem,
    evaluate_candidate,
    genmoves_affine,
    quadratic_forms,
)
from .nlp import NlpProblem, PolySystem, solve_nlp
from .relaxation import Fixings, RelaxationPoint

__all__ = [
    "NlpResult",
    "solve_fixed",
    "solve_continuous",
    "solve_mpec",
    "three_step",
    "rounding_baseline",
    "round_shunts",
    "initial_shunt_state",
    "FEAS_TOL",
    "BINARY_TOL",
]

log = logging.getLogger(__name__)

FEAS_TOL = 1e-6
BINARY_TOL = 1e-4
PENALTY_SCHEDULE = (1.0, 10.0, 100.0, 1e3, 1e4)


@dataclass
class NlpResult:
    candidate: Candidate | None
    status: str  # local-optimal | infeasible-at-tolerance | iteration-limit
    violation: float
    objective: float
    solves: int = 1
    info: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "local-optimal"


INFEASIBLE = "infeasible-at-tolerance"


def _infeasible(violation: float = math.inf, solves: int = 0) -> NlpResult:
    return NlpResult(None, INFEASIBLE, violation, math.inf, solves)


class _Model:
    """Variable layout and polynomial rows of one local problem."""

    def __init__(self, p: RopfProblem, fixed: dict[int, int], direction: str | None, u_lin: dict[int, float] | None = None):
        net = p.net
        self.p, self.net = p, net
        self.fixed = fixed
        self.free = [s for s in net.shunt_buses if s not in fixed]
        self.direction = direction
        self.gens = list(net.generators)
        n, G = net.n, len(self.gens)
        self.ix = 0
        self.iP = 2 * n
        self.iQ = 2 * n + G
        self.iu = 2 * n + 2 * G
        self.il = self.iu + len(self.free)
        self.nz = self.il + (1 if direction else 0)
        nz = self.nz
        idx = net.bus_index
        gpos = {b: i for i, b in enumerate(self.gens)}
        upos = {s: i for i, s in enumerate(self.free)}
        forms = quadratic_forms(net)

        scale = max(1.0, max((abs(g.cost) for g in net.generators.values()), default=1.0))
        self.fscale = scale
        fterms = []
        const = 0.0
        for b, g in net.generators.items():
            fterms.append((0, g.cost / scale, self.iP + gpos[b]))
            const += g.const
        for s, w in (u_lin or {}).items():
            if s in upos:
                fterms.append((0, w / scale, self.iu + upos[s]))
        self.fconst = const

        h: list[tuple] = []
        # balance rows 0..n-1 (P) and n..2n-1 (Q)
        for r, i, j, c in zip(forms.p_inj.row, forms.p_inj.i, forms.p_inj.j, forms.p_inj.c):
            h.append((int(r), float(c), int(i), int(j)))
        for r, i, j, c in zip(forms.q_inj.row, forms.q_inj.i, forms.q_inj.j, forms.q_inj.c):
            h.append((n + int(r), float(c), int(i), int(j)))
        for bid, bus in net.buses.items():
            k = idx[bid]
            e, f = 2 * k, 2 * k + 1
            if bus.load.real:
                h.append((k, bus.load.real))
            if bus.load.imag:
                h.append((n + k, bus.load.imag))
            if bus.shunt is not None:
                gs, bs = bus.shunt.real, bus.shunt.imag
                if bid in upos:
                    u = self.iu + upos[bid]
                    h += [(k, gs, u, e, e), (k, gs, u, f, f), (n + k, -bs, u, e, e), (n + k, -bs, u, f, f)]
                elif fixed[bid] == 1:
                    h += [(k, gs, e, e), (k, gs, f, f), (n + k, -bs, e, e), (n + k, -bs, f, f)]
            if bid in gpos:
                h.append((k, -1.0, self.iP + gpos[bid]))
                h.append((n + k, -1.0, self.iQ + gpos[bid]))
        nrow = 2 * n
        ref = net.reference_bus
        h.append((nrow, 1.0, 2 * idx[ref] + 1))
        nrow += 1

        g_: list[tuple] = []
        nin = 0

        def box(var, lo, hi):
            nonlocal nrow, nin
            if lo == hi:
                h.append((nrow, 1.0, var))
                h.append((nrow, -lo))
                nrow += 1
                return
            if math.isfinite(lo):
                g_.extend([(nin, -1.0, var), (nin, lo)])
                nin += 1
            if math.isfinite(hi):
                g_.extend([(nin, 1.0, var), (nin, -hi)])
                nin += 1

        if direction:
            lo, hi = (0.0, 0.5) if direction == "down" else (0.5, 1.0)
            box(self.il, lo, hi)
            for b, g in net.generators.items():
                a, bb = genmoves_affine(g, p.variant.P0[b], direction)
                h.extend([(nrow, 1.0, self.iP + gpos[b]), (nrow, -bb, self.il), (nrow, -a)])
                nrow += 1
        for b, g in net.generators.items():
            if not direction:
                box(self.iP + gpos[b], g.pmin, g.pmax)
            box(self.iQ + gpos[b], g.qmin, g.qmax)
        for s in self.free:
            box(self.iu + upos[s], 0.0, 1.0)

        for bid, bus in net.buses.items():
            k = idx[bid]
            e, f = 2 * k, 2 * k + 1
            g_.extend([(nin, 1.0, e, e), (nin, 1.0, f, f), (nin, -bus.vmax**2)])
            nin += 1
            if bus.vmin > 0:
                g_.extend([(nin, -1.0, e, e), (nin, -1.0, f, f), (nin, bus.vmin**2)])
                nin += 1
        for r, i, j, c in zip(forms.current.row, forms.current.i, forms.current.j, forms.current.c):
            g_.append((nin + int(r), float(c), int(i), int(j)))
        for r, lim in enumerate(forms.current_limits):
            g_.append((nin + r, -float(lim)))
        nin += forms.current.nrows

        # cardinality rows on the free shunts
        self.card_ok = True
        v = p.variant
        if isinstance(v, (MaxKShunts, MaxKMoves)):
            u0 = v.u0 if isinstance(v, MaxKMoves) else {s: 0 for s in net.shunt_buses}
            used = sum(1 for s, val in fixed.items() if val != u0[s])
            budget = v.k - used - sum(1 for s in self.free if u0[s] == 1)
            if self.free:
                for s in self.free:
                    g_.append((nin, 1.0 if u0[s] == 0 else -1.0, self.iu + upos[s]))
                g_.append((nin, -float(budget)))
                nin += 1
            self.card_ok = used <= v.k

        self.prob = NlpProblem(
            PolySystem.build(1, nz, fterms),
            PolySystem.build(nrow, nz, h),
            PolySystem.build(nin, nz, g_),
        )

    def start(self, cand: Candidate | None) -> np.ndarray:
        net = self.net
        z = np.zeros(self.nz)
        idx = net.bus_index
        for bid, k in idx.items():
            v = cand.v[bid] if cand is not None else 1.0 + 0j
            z[2 * k], z[2 * k + 1] = v.real, v.imag
        ref = net.reference_bus
        if cand is not None:
            # rotate so that the reference angle is zero
            vr = cand.v[ref]
            if abs(vr) > 0:
                rot = abs(vr) / vr
                for bid, k in idx.items():
                    w = cand.v[bid] * rot
                    z[2 * k], z[2 * k + 1] = w.real, w.imag
        for i, b in enumerate(self.gens):
            g = net.generators[b]
            if cand is not None and b in cand.S:
                pz, qz = cand.S[b].real, cand.S[b].imag
            else:
                pz = _mid(g.pmin, g.pmax)
                qz = _mid(g.qmin, g.qmax)
            z[self.iP + i], z[self.iQ + i] = pz, qz
        for i, s in enumerate(self.free):
            z[self.iu + i] = min(max(cand.u[s], 0.0), 1.0) if cand is not None and s in cand.u else 0.5
        if self.direction:
            lo, hi = (0.0, 0.5) if self.direction == "down" else (0.5, 1.0)
            lam = None
            if cand is not None:
                lam = cand.lambda_minus if self.direction == "down" else cand.lambda_plus
            z[self.il] = min(max(lam, lo), hi) if lam is not None else (lo + hi) / 2
        return z

    def candidate(self, z: np.ndarray) -> Candidate:
        net = self.net
        v = {bid: complex(z[2 * k], z[2 * k + 1]) for bid, k in net.bus_index.items()}
        S = {b: complex(z[self.iP + i], z[self.iQ + i]) for i, b in enumerate(self.gens)}
        u = {s: float(val) for s, val in self.fixed.items()}
        for i, s in enumerate(self.free):
            u[s] = float(z[self.iu + i])
        u = {s: u[s] for s in net.shunt_buses}
        c = Candidate(v, S, u)
        if self.direction:
            lam = float(z[self.il])
            if self.direction == "down":
                c.lambda_minus, c.lambda_plus, c.delta_minus, c.delta_plus = lam, 0.5, 1, 0
            else:
                c.lambda_minus, c.lambda_plus, c.delta_minus, c.delta_plus = 0.5, lam, 0, 1
        c.objective = self.p.objective(S)
        return c


def _mid(lo: float, hi: float) -> float:
    if math.isfinite(lo) and math.isfinite(hi):
        return 0.5 * (lo + hi)
    if math.isfinite(lo):
        return max(lo, 0.0)
    if math.isfinite(hi):
        return min(hi, 0.0)
    return 0.0


def _directions(p: RopfProblem, fix: Fixings | None) -> list[str | None]:
    if not isinstance(p.variant, GenMoves):
        return [None]
    if fix is not None and fix.delta:
        return [fix.delta]
    if p.variant.direction == "both":
        return ["up", "down"]
    return [p.variant.direction]


def _run(model: _Model, start: Candidate | None, max_iter: int = 150) -> NlpResult:
    sol = solve_nlp(model.prob, model.start(start), max_iter=max_iter)
    cand = model.candidate(sol.z)
    rep = evaluate_candidate(model.p, cand, FEAS_TOL)
    if rep.feasible and sol.converged:
        status = "local-optimal"
    elif rep.feasible:
        status = "iteration-limit"
    else:
        status = INFEASIBLE
    obj = cand.objective if rep.feasible else math.inf
    return NlpResult(cand, status, rep.max_violation, obj, 1, dict(iterations=sol.iterations, message=sol.message))


def _better(a: NlpResult | None, b: NlpResult) -> NlpResult:
    """Prefer feasible results, then lower objective, then lower violation."""
    if a is None:
        return b
    fa, fb = math.isfinite(a.objective), math.isfinite(b.objective)
    if fa != fb:
        return a if fa else b
    if fa:
        if b.objective < a.objective - 1e-9 * max(1.0, abs(a.objective)):
            return b
        if a.objective < b.objective - 1e-9 * max(1.0, abs(a.objective)):
            return a
        return a if _rank(a) <= _rank(b) else b
    return a if a.violation <= b.violation else b


def _rank(r: NlpResult) -> int:
    return {"local-optimal": 0, "iteration-limit": 1}.get(r.status, 2)


def _total(p: RopfProblem, fix: Fixings) -> dict[int, int]:
    missing = [s for s in p.shunts if s not in fix.u]
    if missing:
        raise ValueError(f"fixing must assign every shunt; missing {missing}")
    return dict(fix.u)


def solve_fixed(p: RopfProblem, fix: Fixings, start: Candidate | None = None) -> NlpResult:
    """Local solve with every shunt fixed; flat start plus the optional warm start."""
    fixed = _total(p, fix)
    best: NlpResult | None = None
    solves = 0
    for d in _directions(p, fix):
        model = _Model(p, fixed, d)
        if not model.card_ok:
            continue
        starts = [None]
        if start is not None:
            starts.append(start)
        for st in starts:
            r = _run(model, st)
            solves += 1
            best = _better(best, r)
        if start is not None and _consistent(start, fixed, d):
            rep = evaluate_candidate(p, start, FEAS_TOL)
            if rep.feasible:
                # never return something worse than a feasible starting point
                best = _better(best, NlpResult(start, "local-optimal", rep.max_violation, rep.objective, 0))
    if best is None:
        return _infeasible(solves=solves)
    best.solves = solves
    return best


def _consistent(c: Candidate, fixed: dict[int, int], direction: str | None) -> bool:
    if any(abs(c.u.get(s, -1) - v) > 0 for s, v in fixed.items()):
        return False
    if direction == "up":
        return c.delta_plus == 1
    if direction == "down":
        return c.delta_minus == 1
    return True


def solve_continuous(p: RopfProblem, fix: Fixings | None = None, start: Candidate | None = None) -> NlpResult:
    """Local solve with the free shunt variables relaxed to ``[0, 1]``."""
    fix = fix or Fixings()
    best: NlpResult | None = None
    solves = 0
    for d in _directions(p, fix):
        model = _Model(p, dict(fix.u), d)
        if not model.card_ok:
            continue
        for st in ([None, start] if start is not None else [None]):
            best = _better(best, _run(model, st))
            solves += 1
    if best is None:
        return _infeasible()
    best.solves = solves
    return best


def _complementarity(u: dict[int, float], free: list[int]) -> float:
    return sum(u[s] * (1.0 - u[s]) for s in free)


def _binary_gap(u: dict[int, float], free: list[int]) -> float:
    return max((min(u[s], 1.0 - u[s]) for s in free), default=0.0)


def solve_mpec(
    p: RopfProblem,
    start: Candidate,
    fix: Fixings | None = None,
    schedule=PENALTY_SCHEDULE,
    inner: int = 6,
) -> NlpResult:
    """Drive the free shunt variables to binary values with a penalty ``rho * sum u(1-u)``.

    The concave penalty is handled by majorization: each subproblem replaces
    it with its tangent at the current point, so every accepted step lowers
    the penalized objective. Steps that would raise ``sum u(1-u)`` are
    rejected.
    """
    fix = fix or Fixings()
    free = [s for s in p.shunts if s not in fix.u]
    cur = start
    trace = [_complementarity(cur.u, free)]
    if _binary_gap(cur.u, free) <= BINARY_TOL:
        return NlpResult(cur, "local-optimal", 0.0, cur.objective, 0, dict(penalty=trace))
    base = max(1.0, abs(start.objective) if math.isfinite(start.objective) else 1.0) / 100.0
    direction = _directions(p, fix)
    d = direction[0] if len(direction) == 1 else ("up" if cur.delta_plus == 1 else "down")
    solves = 0
    for rho in schedule:
        for _ in range(inner):
            w = {s: base * rho * (1.0 - 2.0 * cur.u[s]) for s in free}
            model = _Model(p, dict(fix.u), d, u_lin=w)
            r = _run(model, cur)
            solves += 1
            if r.candidate is None or not math.isfinite(r.objective):
                break
            comp = _complementarity(r.candidate.u, free)
            if comp > trace[-1] + 1e-12:
                break
            moved = max(abs(r.candidate.u[s] - cur.u[s]) for s in free)
            cur = r.candidate
            trace.append(comp)
            if _binary_gap(cur.u, free) <= BINARY_TOL or moved < 1e-7:
                break
        if _binary_gap(cur.u, free) <= BINARY_TOL:
            rep = evaluate_candidate(p, cur, FEAS_TOL)
            return NlpResult(cur, "local-optimal", rep.max_violation, cur.objective, solves, dict(penalty=trace, rho=rho))
    rep = evaluate_candidate(p, cur, FEAS_TOL)
    return NlpResult(cur, "iteration-limit", rep.max_violation, cur.objective, solves, dict(penalty=trace))


def round_shunts(p: RopfProblem, u: dict[int, float], fix: Fixings | None = None) -> dict[int, int]:
    """Round at 0.5 (ties up), then repair the cardinality constraint.

    Under MAXkshunts only the largest values are kept at 1; under MAXkmoves
    only the moves with the largest distance from ``u0`` are kept.
    """
    fix = fix or Fixings()
    out = {s: int(u[s] >= 0.5) for s in p.shunts if s not in fix.u}
    out.update(fix.u)
    free = [s for s in p.shunts if s not in fix.u]
    v = p.variant
    if isinstance(v, MaxKShunts):
        budget = v.k - fix.ones
        ones = sorted((s for s in free if out[s] == 1), key=lambda s: (-u[s], s))
        for s in ones[max(budget, 0):]:
            out[s] = 0
    elif isinstance(v, MaxKMoves):
        budget = v.k - sum(1 for s, val in fix.u.items() if val != v.u0[s])
        moves = sorted((s for s in free if out[s] != v.u0[s]), key=lambda s: (-abs(u[s] - v.u0[s]), s))
        for s in moves[max(budget, 0):]:
            out[s] = v.u0[s]
    return out


def three_step(p: RopfProblem, fix: Fixings | None = None) -> NlpResult:
    """Continuous relaxation, complementarity penalty, then fix and resolve.

    With every shunt fixed only the last step runs.
    """
    fix = fix or Fixings()
    if all(s in fix.u for s in p.shunts):
        return solve_fixed(p, fix)
    best: NlpResult | None = None
    solves = 0
    for d in _directions(p, fix):
        fd = Fixings(dict(fix.u), d)
        r1 = solve_continuous(p, fd)
        solves += r1.solves
        if r1.candidate is None:
            continue
        r2 = solve_mpec(p, r1.candidate, fd)
        solves += r2.solves
        full = round_shunts(p, r2.candidate.u, fd)
        r3 = solve_fixed(p, Fixings(full, d), start=r2.candidate)
        solves += r3.solves
        r3.info.update(continuous=r1.objective, mpec_status=r2.status, rounded=full)
        best = _better(best, r3)
    if best is None:
        return _infeasible(solves=solves)
    best.solves = solves
    return best


def rounding_baseline(p: RopfProblem, rp: RelaxationPoint, k: int | None = None) -> NlpResult:
    """Fix to 1 every relaxed ``u*`` at or above 0.5, keeping the ``k`` largest."""
    if rp.status != "optimal":
        raise ValueError("rounding needs an optimal relaxation point")
    if k is None and isinstance(p.variant, MaxKShunts):
        k = p.variant.k
    ones = sorted((s for s in p.shunts if rp.u[s] >= 0.5), key=lambda s: (-rp.u[s], s))
    if k is not None:
        ones = ones[:k]
    fixed = {s: int(s in ones) for s in p.shunts}
    return solve_fixed(p, Fixings(fixed, rp.direction))


def initial_shunt_state(net: Network) -> dict[int, int]:
    """Round the continuous relaxation of the unconstrained problem at 0.5 (ties up)."""
    if not net.shunt_buses:
        return {}
    p = RopfProblem(net, MaxKShunts(len(net.shunt_buses)))
    r = solve_continuous(p)
    if r.candidate is None or not math.isfinite(r.objective):
        raise RuntimeError("continuous relaxation has no feasible point")
    return {s: int(r.candidate.u[s] >= 0.5) for s in net.shunt_buses}
