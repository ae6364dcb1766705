"""Clique-decomposed semidefinite relaxation of the ROPF problem.

The lifted matrix lives in the real voltage coordinates (``2k`` real part,
``2k+1`` imaginary part of the bus at position ``k``); each clique of the
decomposition owns a PSD block over its coordinates and overlapping blocks
are tied together entry-wise. The products ``u_s * V_ss`` are replaced by
scalars ``xi_s`` constrained by McCormick envelopes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import IO

import numpy as np

from .chordal import CliqueDecomposition
from .conic import ConicProgram, ConicSolution, smat, solve, svec_index
from .network import (
    GenMoves,
    MaxKMoves,
    MaxKShunts,
    RopfProblem,
    branch_injection_terms,
    genmoves_affine,
    quadratic_forms,
)

__all__ = [
    "Plane",
    "mccormick",
    "Fixings",
    "SdpInstance",
    "build_sdp",
    "RelaxationPoint",
    "extract_relaxation_point",
    "solve_relaxation",
    "write_sdpa",
]

SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class Plane:
    """``a_u*u + a_v*V + a_xi*xi >= rhs``."""

    a_u: float
    a_v: float
    a_xi: float
    rhs: float

    def slack(self, u: float, V: float, xi: float) -> float:
        return self.a_u * u + self.a_v * V + self.a_xi * xi - self.rhs


def mccormick(u_bounds=(0.0, 1.0), v_bounds=(0.81, 1.21)) -> list[Plane]:
    """Envelope of ``xi = u * V`` over the box ``u_bounds x v_bounds``."""
    ul, uu = u_bounds
    vl, vu = v_bounds
    if vl > vu or ul > uu:
        raise ValueError("empty box")
    return [
        Plane(vl, uu, -1.0, uu * vl),  # xi <= vl*u + uu*V - uu*vl
        Plane(vu, ul, -1.0, ul * vu),  # xi <= vu*u + ul*V - ul*vu
        Plane(-vu, -uu, 1.0, -uu * vu),  # xi >= vu*u + uu*V - uu*vu
        Plane(-vl, -ul, 1.0, -ul * vl),  # xi >= vl*u + ul*V - ul*vl
    ]


@dataclass
class Fixings:
    """Partial assignment of the shunt binaries (and the GENmoves direction)."""

    u: dict[int, int] = field(default_factory=dict)
    delta: str | None = None

    def __post_init__(self) -> None:
        if any(v not in (0, 1) for v in self.u.values()):
            raise ValueError("fixings must be binary")
        if self.delta not in (None, "up", "down"):
            raise ValueError(f"bad delta {self.delta!r}")

    def with_(self, bus: int, value: int) -> "Fixings":
        u = dict(self.u)
        u[bus] = value
        return Fixings(u, self.delta)

    @property
    def ones(self) -> int:
        return sum(self.u.values())


# affine expression over the conic variables: (constant, {column key: coef})
# column keys: ("l", i) nonnegative scalar, ("f", i) free scalar, ("k", blk, pos) svec entry


class _Builder:
    def __init__(self, deco: CliqueDecomposition):
        self.deco = deco
        self.n_l = 0
        self.n_f = 0
        self.rows: list[dict] = []
        self.rhs: list[float] = []
        self.kinds: list[str] = []
        self.obj: dict = {}
        self.offset = 0.0
        self.pair_home: dict[tuple[int, int], tuple[int, int]] = {}
        self.local: list[dict[int, int]] = []
        self.owners: dict[int, list[int]] = {}
        for b, cl in enumerate(deco.cliques):
            pos = {v: i for i, v in enumerate(cl)}
            self.local.append(pos)
            for v in cl:
                self.owners.setdefault(v, []).append(b)
            for i, vi in enumerate(cl):
                for vj in cl[i:]:
                    key = (min(vi, vj), max(vi, vj))
                    if key not in self.pair_home:
                        self.pair_home[key] = (b, 0)

    def nonneg(self) -> tuple:
        self.n_l += 1
        return ("l", self.n_l - 1)

    def free(self) -> tuple:
        self.n_f += 1
        return ("f", self.n_f - 1)

    def entry(self, i: int, j: int, b: int | None = None) -> tuple[tuple, float]:
        """Column key and svec coefficient for ``X_ij`` in block ``b`` (default: its home block)."""
        key = (min(i, j), max(i, j))
        if b is None:
            if key not in self.pair_home:
                raise KeyError(f"entry {key} not covered by any clique")
            b, _ = self.pair_home[key]
        pos = self.local[b]
        d = len(self.deco.cliques[b])
        k = svec_index(d, pos[i], pos[j])
        return ("k", b, k), (1.0 if i == j else 1.0 / SQRT2)

    def place(self, terms) -> list[int]:
        """Greedy block choice per term: the clique holding most of the row's pairs.

        Keeping the terms of one row in one block avoids routing large
        multipliers through the linking equalities.
        """
        left = list(range(len(terms)))
        where = [0] * len(terms)
        while left:
            i0, j0 = terms[left[0]][0], terms[left[0]][1]
            best, best_hit = None, []
            for b in self.owners[i0]:
                pos = self.local[b]
                if j0 not in pos:
                    continue
                hit = [t for t in left if terms[t][0] in pos and terms[t][1] in pos]
                if len(hit) > len(best_hit):
                    best, best_hit = b, hit
            if best is None:
                raise KeyError(f"entry {(i0, j0)} not covered by any clique")
            for t in best_hit:
                where[t] = best
            hit = set(best_hit)
            left = [t for t in left if t not in hit]
        return where

    def add_quad(self, row: dict, terms, scale: float = 1.0) -> None:
        terms = list(terms)
        for (i, j, c), b in zip(terms, self.place(terms)):
            col, w = self.entry(i, j, b)
            row[col] = row.get(col, 0.0) + scale * c * w

    def scalar(self, lo: float, hi: float) -> tuple[float, dict]:
        if lo > hi:
            raise ValueError("empty bounds")
        if lo == hi:
            return lo, {}
        if math.isfinite(lo) and math.isfinite(hi):
            t, s = self.nonneg(), self.nonneg()
            self.add_row({t: 1.0, s: 1.0}, hi - lo, "bound")
            return lo, {t: 1.0}
        if math.isfinite(lo):
            return lo, {self.nonneg(): 1.0}
        if math.isfinite(hi):
            return hi, {self.nonneg(): -1.0}
        return 0.0, {self.free(): 1.0}

    def add_row(self, row: dict, rhs: float, kind: str) -> None:
        self.rows.append({k: v for k, v in row.items() if v != 0.0})
        self.rhs.append(rhs)
        self.kinds.append(kind)

    def add_ge(self, row: dict, rhs: float, kind: str) -> None:
        row = dict(row)
        row[self.nonneg()] = -1.0
        self.add_row(row, rhs, kind)

    def add_le(self, row: dict, rhs: float, kind: str) -> None:
        row = dict(row)
        row[self.nonneg()] = 1.0
        self.add_row(row, rhs, kind)

    def columns(self) -> dict:
        dims = [len(c) for c in self.deco.cliques]
        offs = []
        k = self.n_f + self.n_l
        for d in dims:
            offs.append(k)
            k += d * (d + 1) // 2
        return dict(dims=dims, offs=offs, n=k)

    def col_index(self, key, lay) -> int:
        if key[0] == "f":
            return key[1]
        if key[0] == "l":
            return self.n_f + key[1]
        return lay["offs"][key[1]] + key[2]

    def program(self) -> ConicProgram:
        lay = self.columns()
        rr, cc, vv = [], [], []
        for r, row in enumerate(self.rows):
            for key, v in row.items():
                rr.append(r)
                cc.append(self.col_index(key, lay))
                vv.append(v)
        c = np.zeros(lay["n"])
        for key, v in self.obj.items():
            c[self.col_index(key, lay)] += v
        return ConicProgram.from_triplets(c, rr, cc, vv, np.asarray(self.rhs), self.n_f, self.n_l, lay["dims"])


def _add(dst: dict, expr: dict, scale: float = 1.0) -> None:
    for k, v in expr.items():
        dst[k] = dst.get(k, 0.0) + scale * v


@dataclass
class SdpInstance:
    problem: RopfProblem
    fixings: Fixings
    deco: CliqueDecomposition
    prog: ConicProgram | None
    offset: float
    row_kinds: list[str]
    u_expr: dict[int, tuple[float, dict]]
    xi_expr: dict[int, tuple[float, dict]]
    lam_expr: tuple[float, dict] | None
    direction: str | None
    infeasible: bool = False  # detected while assembling
    _layout: dict = field(default_factory=dict, repr=False)
    _builder: _Builder | None = field(default=None, repr=False)

    @property
    def blocks(self) -> list[int]:
        return list(self.prog.psd) if self.prog is not None else []

    def count(self, kind: str) -> int:
        return sum(1 for k in self.row_kinds if k == kind)

    def value(self, expr: tuple[float, dict], x: np.ndarray) -> float:
        const, lin = expr
        lay = self._layout
        return const + sum(v * x[self._builder.col_index(k, lay)] for k, v in lin.items())

    def block_matrices(self, x: np.ndarray) -> list[np.ndarray]:
        out = []
        for d, off in zip(self._layout["dims"], self._layout["offs"]):
            out.append(smat(x[off:off + d * (d + 1) // 2], d))
        return out

    def vdiag(self, x: np.ndarray) -> dict[int, float]:
        net = self.problem.net
        out = {}
        for bid, k in net.bus_index.items():
            val = 0.0
            for c in (2 * k, 2 * k + 1):
                key, _ = self._builder.entry(c, c)
                val += x[self._builder.col_index(key, self._layout)]
            out[bid] = val
        return out


def _resolve_direction(p: RopfProblem, fix: Fixings) -> str | None:
    if not isinstance(p.variant, GenMoves):
        return None
    d = fix.delta or (p.variant.direction if p.variant.direction != "both" else None)
    if d is None:
        raise ValueError("GENmoves relaxation needs a single direction (up or down)")
    return d


def build_sdp(p: RopfProblem, deco: CliqueDecomposition, fix: Fixings | None = None) -> SdpInstance:
    fix = fix or Fixings()
    net = p.net
    bad = [b for b in fix.u if b not in net.shunt_buses]
    if bad:
        raise ValueError(f"cannot fix non-shunt buses {bad}")
    if deco.n_vertices != 2 * net.n:
        raise ValueError("decomposition does not match the network size")
    direction = _resolve_direction(p, fix)
    forms = quadratic_forms(net)
    B = _Builder(deco)
    idx = net.bus_index

    def vterms(k):
        return [(2 * k, 2 * k, 1.0), (2 * k + 1, 2 * k + 1, 1.0)]

    # generator scalars
    lam_expr = None
    P_expr: dict[int, tuple[float, dict]] = {}
    Q_expr: dict[int, tuple[float, dict]] = {}
    if direction is not None:
        lo, hi = (0.0, 0.5) if direction == "down" else (0.5, 1.0)
        lam_expr = B.scalar(lo, hi)
    for bid, g in net.generators.items():
        if direction is not None:
            a, b = genmoves_affine(g, p.variant.P0[bid], direction)
            lc, ll = lam_expr
            P_expr[bid] = (a + b * lc, {k: b * v for k, v in ll.items()})
        else:
            P_expr[bid] = B.scalar(g.pmin, g.pmax)
        Q_expr[bid] = B.scalar(g.qmin, g.qmax)
        const, lin = P_expr[bid]
        _add(B.obj, lin, g.cost)
        B.offset += g.cost * const + g.const

    # shunt scalars
    u_expr: dict[int, tuple[float, dict]] = {}
    xi_expr: dict[int, tuple[float, dict]] = {}
    for s in net.shunt_buses:
        if s in fix.u:
            u_expr[s] = (float(fix.u[s]), {})
        else:
            u_expr[s] = B.scalar(0.0, 1.0)
            xi_expr[s] = (0.0, {B.nonneg(): 1.0})

    # power balance; each branch's share goes to one block covering its ends
    groups: dict[int, list] = {}
    for k, pt, qt in branch_injection_terms(net):
        groups.setdefault(k, []).append((pt, qt))
    for bid, bus in net.buses.items():
        k = idx[bid]
        prow: dict = {}
        qrow: dict = {}
        for pt, qt in groups.get(k, []):
            B.add_quad(prow, pt)
            B.add_quad(qrow, qt)
        prhs, qrhs = -bus.load.real, -bus.load.imag
        if bus.shunt is not None:
            g_s, b_s = bus.shunt.real, bus.shunt.imag
            if bid in xi_expr:
                _add(prow, xi_expr[bid][1], g_s)
                _add(qrow, xi_expr[bid][1], -b_s)
            elif fix.u[bid] == 1:
                B.add_quad(prow, vterms(k), g_s)
                B.add_quad(qrow, vterms(k), -b_s)
        if bid in P_expr:
            c0, lin = P_expr[bid]
            _add(prow, lin, -1.0)
            prhs += c0
            c0, lin = Q_expr[bid]
            _add(qrow, lin, -1.0)
            qrhs += c0
        B.add_row(prow, prhs, "balance_p")
        B.add_row(qrow, qrhs, "balance_q")

    # voltage magnitude bounds
    for bid, bus in net.buses.items():
        k = idx[bid]
        row: dict = {}
        B.add_quad(row, vterms(k))
        if bus.vmin == bus.vmax:
            B.add_row(row, bus.vmin**2, "vbound")
            continue
        if bus.vmin > 0:
            B.add_ge(row, bus.vmin**2, "vbound")
        B.add_le(row, bus.vmax**2, "vbound")

    # current limits
    for r in range(forms.current.nrows):
        row = {}
        B.add_quad(row, forms.current.terms(r))
        B.add_le(row, float(forms.current_limits[r]), "current")

    # McCormick envelopes
    for s, (xc, xl) in xi_expr.items():
        bus = net.buses[s]
        uc, ul = u_expr[s]
        for pl in mccormick((0.0, 1.0), (bus.vmin**2, bus.vmax**2)):
            row: dict = {}
            B.add_quad(row, vterms(idx[s]), pl.a_v)
            _add(row, ul, pl.a_u)
            _add(row, xl, pl.a_xi)
            B.add_ge(row, pl.rhs - pl.a_u * uc - pl.a_xi * xc, "mccormick")

    # cardinality constraints
    infeasible = False
    v = p.variant
    if isinstance(v, (MaxKShunts, MaxKMoves)):
        u0 = v.u0 if isinstance(v, MaxKMoves) else {s: 0 for s in net.shunt_buses}
        row: dict = {}
        const = 0.0
        for s in net.shunt_buses:
            uc, ul = u_expr[s]
            sign = 1.0 if u0[s] == 0 else -1.0
            const += uc * sign + (0.0 if u0[s] == 0 else 1.0)
            _add(row, ul, sign)
        rhs = v.k - const
        if rhs < -1e-12:
            infeasible = True
        elif row:
            B.add_le(row, rhs, "variant")

    # linking equalities between neighbouring cliques
    for lk in deco.links:
        dp, dc = len(deco.cliques[lk.parent]), len(deco.cliques[lk.child])
        pp, pc = B.local[lk.parent], B.local[lk.child]
        sh = lk.shared
        for a in range(len(sh)):
            for b in range(a, len(sh)):
                i, j = sh[a], sh[b]
                kp = svec_index(dp, pp[i], pp[j])
                kc = svec_index(dc, pc[i], pc[j])
                B.add_row({("k", lk.parent, kp): 1.0, ("k", lk.child, kc): -1.0}, 0.0, "link")

    prog = B.program()
    inst = SdpInstance(p, fix, deco, prog, B.offset, B.kinds, u_expr, xi_expr, lam_expr, direction, infeasible)
    inst._layout = B.columns()
    inst._builder = B
    return inst


@dataclass
class RelaxationPoint:
    lower_bound: float
    u: dict[int, float]
    vdiag: dict[int, float]
    status: str  # optimal | infeasible | numerical-failure
    lam: float | None = None
    direction: str | None = None
    solution: ConicSolution | None = field(default=None, repr=False)
    xi: dict[int, float] = field(default_factory=dict)


def extract_relaxation_point(inst: SdpInstance, sol: ConicSolution | None, tol: float = 1e-6) -> RelaxationPoint:
    if inst.infeasible or sol is None or sol.status == "primal-infeasible":
        return RelaxationPoint(math.inf, {}, {}, "infeasible", direction=inst.direction, solution=sol)
    if sol.status != "optimal":
        return RelaxationPoint(math.nan, {}, {}, "numerical-failure", direction=inst.direction, solution=sol)
    x = sol.x
    vd = inst.vdiag(x)
    u: dict[int, float] = {}
    xi: dict[int, float] = {}
    for s, ex in inst.u_expr.items():
        if s in inst.xi_expr:
            xs = inst.value(inst.xi_expr[s], x)
            if vd[s] <= 0:
                return RelaxationPoint(math.nan, {}, vd, "numerical-failure", direction=inst.direction, solution=sol)
            xi[s] = xs
            u[s] = float(min(1.0, max(0.0, xs / vd[s])))
        else:
            u[s] = ex[0]
            xi[s] = ex[0] * vd[s]
    lam = inst.value(inst.lam_expr, x) if inst.lam_expr is not None else None
    lb = sol.dual_objective + inst.offset
    return RelaxationPoint(lb, u, vd, "optimal", lam, inst.direction, sol, xi)


def solve_relaxation(
    p: RopfProblem,
    deco: CliqueDecomposition,
    fix: Fixings | None = None,
    tol: float = 1e-7,
    max_iter: int = 200,
) -> RelaxationPoint:
    """Build and solve the relaxation; GENmoves ``both`` keeps the lower of the two directions."""
    fix = fix or Fixings()
    if isinstance(p.variant, GenMoves) and fix.delta is None and p.variant.direction == "both":
        pts = [solve_relaxation(p, deco, Fixings(dict(fix.u), d), tol, max_iter) for d in ("up", "down")]
        if any(q.status == "numerical-failure" for q in pts):
            return next(q for q in pts if q.status == "numerical-failure")
        return min(pts, key=lambda q: q.lower_bound)
    inst = build_sdp(p, deco, fix)
    if inst.infeasible:
        return extract_relaxation_point(inst, None)
    sol = solve(inst.prog, tol=tol, max_iter=max_iter)
    return extract_relaxation_point(inst, sol)


def write_sdpa(inst: SdpInstance, fp: IO[str]) -> None:
    """Export in SDPA sparse format (the conic primal becomes the SDPA dual).

    Nonnegative scalars form a diagonal block; free scalars are not
    representable and raise ``ValueError``.
    """
    prog = inst.prog
    if prog.free:
        raise ValueError("free variables cannot be written in SDPA format")
    blocks = ([-prog.nonneg] if prog.nonneg else []) + list(prog.psd)
    fp.write(f"{prog.m}\n{len(blocks)}\n")
    fp.write(" ".join(str(b) for b in blocks) + "\n")
    fp.write(" ".join(repr(float(v)) for v in prog.b) + "\n")
    lp0 = 1 if prog.nonneg else 0

    def locate(col):
        if col < prog.nonneg:
            return 1, col + 1, col + 1, 1.0
        for bi, (d, sl) in enumerate(zip(prog.psd, prog.block_slices())):
            if sl.start <= col < sl.stop:
                k = col - sl.start
                j = 0
                while k >= d - j:
                    k -= d - j
                    j += 1
                i = j + k
                return lp0 + bi + 1, j + 1, i + 1, (1.0 if i == j else 1.0 / SQRT2)
        raise IndexError(col)

    for col in np.nonzero(prog.c)[0]:
        blk, i, j, w = locate(col)
        fp.write(f"0 {blk} {i} {j} {-prog.c[col] * w!r}\n")
    A = prog.A.tocoo()
    for r, col, v in zip(A.row, A.col, A.data):
        blk, i, j, w = locate(col)
        fp.write(f"{r + 1} {blk} {i} {j} {v * w!r}\n")
