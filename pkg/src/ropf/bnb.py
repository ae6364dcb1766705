"""SDP-based branch and bound over the shunt binaries.

Nodes carry the bound of their father and a partial fixing. Each node is
bounded by the relaxation, pruned, finished by a local solve when the
relaxed binaries come out integral, or split on the free ``u`` closest to 1.
The search is a matheuristic: it only branches on binaries, so leaves may
keep a gap.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

from .chordal import CliqueDecomposition, decompose
from .local import BINARY_TOL, NlpResult, three_step
from .network import (
    Candidate,
    GenMoves,
    MaxKMoves,
    MaxKShunts,
    RopfProblem,
    SOLVED_GAP,
    evaluate_candidate,
    relative_gap,
)
from .relaxation import Fixings, RelaxationPoint, solve_relaxation

__all__ = [
    "Thresholds",
    "BnbConfig",
    "BnbNode",
    "NodeRecord",
    "BnbResult",
    "default_thresholds",
    "initial_fixing",
    "select_node",
    "branch_variable",
    "sdp_oracle",
    "run",
]

log = logging.getLogger(__name__)

BoundOracle = Callable[[RopfProblem, Fixings], RelaxationPoint]
LocalOracle = Callable[[RopfProblem, Fixings], NlpResult]


@dataclass(frozen=True)
class Thresholds:
    """Fix ``u*`` to 0 at or below ``l`` and to 1 at or above ``u``.

    ``None`` disables a side. With ``strict`` both comparisons are strict.
    """

    l: float | None = None
    u: float | None = None
    strict: bool = False

    def fix_zero(self, x: float) -> bool:
        if self.l is None:
            return False
        return x < self.l if self.strict else x <= self.l

    def fix_one(self, x: float) -> bool:
        if self.u is None:
            return False
        return x > self.u if self.strict else x >= self.u


NO_FIXING = Thresholds()


def default_thresholds(p: RopfProblem) -> Thresholds:
    return _variant_thresholds(p.variant)


@dataclass
class BnbConfig:
    thresholds: Thresholds | None = None  # None: per-variant defaults
    time_limit_s: float = 3600.0
    gap_tol: float = SOLVED_GAP
    binary_tol: float = BINARY_TOL
    sdp_tol: float = 1e-7

    def __post_init__(self) -> None:
        if not self.time_limit_s > 0:
            raise ValueError("time limit must be positive")
        if self.gap_tol < 0:
            raise ValueError("gap_tol must be nonnegative")


@dataclass
class BnbNode:
    father_lb: float
    fixings: Fixings
    depth: int = 0
    seq: int = 0


@dataclass
class NodeRecord:
    index: int
    depth: int
    fixing: dict[int, int]
    father_lb: float
    lb: float
    status: str  # pruned-bound | pruned-infeasible | binary | branched | numerical
    branch: int | None
    ub: float
    u: dict[int, float] = field(default_factory=dict)  # relaxed binaries at the node

    def line(self) -> str:
        fx = "".join(f" {s}={v}" for s, v in sorted(self.fixing.items())) or " -"
        br = f" branch={self.branch}" if self.branch is not None else ""
        return f"node {self.index} depth {self.depth} fix[{fx.strip()}] lb {self.lb:.6f} ub {self.ub:.6f} {self.status}{br}"


@dataclass
class BnbResult:
    ub: float
    candidate: Candidate | None
    lb: float
    nodes: int
    time_s: float
    timed_out: bool
    solved: bool
    free_vars: int = 0
    fixing0: dict[int, int] = field(default_factory=dict)
    trace: list[NodeRecord] = field(default_factory=list)

    @property
    def gap(self) -> float:
        return relative_gap(self.ub, self.lb)

    def summary(self) -> dict:
        def num(x):
            return x if math.isfinite(x) else str(x)

        return dict(
            ub=num(self.ub),
            lb=num(self.lb),
            gap=num(self.gap),
            nodes=self.nodes,
            time_s=self.time_s,
            timed_out=self.timed_out,
            solved=self.solved,
            free_vars=self.free_vars,
            fixing0={str(k): v for k, v in sorted(self.fixing0.items())},
            candidate=self.candidate.to_json() if self.candidate is not None else None,
        )

    def to_json(self, **kw) -> str:
        return json.dumps(self.summary(), **kw)


def initial_fixing(rp: RelaxationPoint, variant, thresholds: Thresholds | None = None) -> Fixings:
    """Fixings implied by the relaxed binaries; ``variant`` may be a problem or a variant."""
    th = thresholds
    if th is None:
        th = _variant_thresholds(variant.variant if isinstance(variant, RopfProblem) else variant)
    fixed: dict[int, int] = {}
    for s in sorted(rp.u):
        x = rp.u[s]
        if th.fix_one(x):
            fixed[s] = 1
        elif th.fix_zero(x):
            fixed[s] = 0
    return Fixings(fixed)


def _variant_thresholds(variant) -> Thresholds:
    if isinstance(variant, MaxKShunts) or variant == "MAXkshunts":
        return Thresholds(l=0.25)
    if isinstance(variant, MaxKMoves) or variant == "MAXkmoves":
        return Thresholds(u=0.75)
    if isinstance(variant, GenMoves) or variant == "GENmoves":
        return Thresholds(l=1e-4, u=0.9, strict=True)
    raise ValueError(f"unknown variant {variant!r}")


def select_node(nodes: list[BnbNode]) -> BnbNode:
    """Deepest first, then more ones, then the most recently created."""
    if not nodes:
        raise ValueError("no open nodes")
    return max(nodes, key=lambda n: (n.depth, n.fixings.ones, n.seq))


def branch_variable(rp: RelaxationPoint, free) -> int:
    """Free shunt with the largest relaxed value; ties go to the lower bus id."""
    free = sorted(free)
    if not free:
        raise ValueError("nothing to branch on")
    return max(free, key=lambda s: (rp.u[s], -s))


def _close_cardinality(p: RopfProblem, fix: Fixings) -> Fixings:
    """Fix the remaining free shunts once the budget is used up."""
    v = p.variant
    free = [s for s in p.shunts if s not in fix.u]
    if not free:
        return fix
    if isinstance(v, MaxKShunts) and fix.ones >= v.k:
        u = dict(fix.u)
        u.update({s: 0 for s in free})
        return Fixings(u, fix.delta)
    if isinstance(v, MaxKMoves) and sum(1 for s, x in fix.u.items() if x != v.u0[s]) >= v.k:
        u = dict(fix.u)
        u.update({s: v.u0[s] for s in free})
        return Fixings(u, fix.delta)
    return fix


def sdp_oracle(deco: CliqueDecomposition, tol: float = 1e-7) -> BoundOracle:
    def bound(p: RopfProblem, fix: Fixings) -> RelaxationPoint:
        return solve_relaxation(p, deco, fix, tol=tol)

    return bound


def _pruned_by(lb: float, ub: float, gap_tol: float) -> bool:
    if not math.isfinite(ub):
        return False
    return lb > ub - gap_tol * abs(ub)


def run(
    p: RopfProblem,
    cfg: BnbConfig | None = None,
    root: RelaxationPoint | None = None,
    first: NlpResult | None = None,
    bound: BoundOracle | None = None,
    local: LocalOracle | None = None,
    deco: CliqueDecomposition | None = None,
) -> BnbResult:
    """Branch and bound from the root relaxation point.

    ``first`` is the unconstrained three-step result; the returned UB never
    exceeds it. ``bound`` and ``local`` default to the SDP relaxation and the
    three-step heuristic.
    """
    cfg = cfg or BnbConfig()
    t0 = time.perf_counter()
    if bound is None:
        bound = sdp_oracle(deco if deco is not None else decompose(p.net), cfg.sdp_tol)
    local = local or three_step
    if root is None:
        root = bound(p, Fixings())
    if first is None:
        first = local(p, Fixings())

    def finish(best: NlpResult | None, lb: float, nodes: int, timed_out: bool, trace, free_vars, fix0):
        cands = [r for r in (best, first) if r is not None and math.isfinite(r.objective)]
        win = min(cands, key=lambda r: r.objective) if cands else None
        ub = win.objective if win else math.inf
        cand = win.candidate if win else None
        return BnbResult(
            ub, cand, lb, nodes, time.perf_counter() - t0, timed_out,
            math.isfinite(lb) and relative_gap(ub, lb) <= SOLVED_GAP, free_vars, fix0, trace,
        )

    if root.status != "optimal":
        lb = math.inf if root.status == "infeasible" else -math.inf
        return finish(None, lb, 0, False, [], 0, {})

    th = cfg.thresholds if cfg.thresholds is not None else default_thresholds(p)
    fix0 = _close_cardinality(p, initial_fixing(root, p, th))
    free0 = [s for s in p.shunts if s not in fix0.u]
    best = local(p, fix0) if fix0.u else first
    ub = best.objective if best is not None else math.inf
    if math.isfinite(first.objective) and first.objective < ub:
        ub = first.objective  # keep the first-phase bound for pruning as well

    counter = itertools.count()
    open_nodes = [BnbNode(-math.inf, fix0, 0, next(counter))]
    trace: list[NodeRecord] = []
    explored = 0
    timed_out = False
    while open_nodes:
        if time.perf_counter() - t0 > cfg.time_limit_s:
            timed_out = True
            break
        node = select_node(open_nodes)
        open_nodes.remove(node)
        fix = node.fixings
        explored += 1
        rp = root if not fix.u else bound(p, fix)
        free = [s for s in p.shunts if s not in fix.u]
        branch = None
        if rp.status == "infeasible":
            status, lb = "pruned-infeasible", math.inf
        elif rp.status != "optimal":
            # no usable bound: keep the father's and branch blindly
            status, lb = "numerical", node.father_lb
        elif _pruned_by(rp.lower_bound, ub, cfg.gap_tol):
            status, lb = "pruned-bound", rp.lower_bound
        else:
            lb = rp.lower_bound
            status = "binary" if all(min(rp.u[s], 1 - rp.u[s]) <= cfg.binary_tol for s in free) else "branched"

        action = status
        if status == "numerical":
            action = "branched" if free else "binary"
        if action == "binary":
            r = local(p, fix)
            if math.isfinite(r.objective) and r.objective < ub:
                best, ub = r, r.objective
                open_nodes = [n for n in open_nodes if not _pruned_by(n.father_lb, ub, cfg.gap_tol)]
        elif action == "branched":
            if rp.status == "optimal":
                branch = branch_variable(rp, free)
            else:
                branch = min(free)
            for val in (1, 0):
                child = _close_cardinality(p, fix.with_(branch, val))
                open_nodes.append(BnbNode(lb, child, node.depth + 1, next(counter)))
        u_node = {s: float(x) for s, x in rp.u.items()} if rp.status == "optimal" else {}
        rec = NodeRecord(explored, node.depth, dict(fix.u), node.father_lb, lb, status, branch, ub, u_node)
        trace.append(rec)
        log.info(rec.line())

    lb_root = root.lower_bound
    return finish(best, lb_root, explored, timed_out, trace, len(free0), dict(fix0.u))


def check_incumbent(p: RopfProblem, res: BnbResult, tol: float = 1e-6) -> bool:
    """Re-validate the returned candidate."""
    if res.candidate is None:
        return not math.isfinite(res.ub)
    rep = evaluate_candidate(p, res.candidate, tol)
    return rep.feasible and abs(rep.objective - res.ub) <= 1e-9 * max(1.0, abs(res.ub))
