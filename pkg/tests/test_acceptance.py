"""End-to-end acceptance checks, one test (or test group) per criterion.

Each check records a PASS/FAIL line that is printed in the pytest terminal
summary under "acceptance criteria".
"""

import functools
import itertools
import math

import numpy as np
import pytest

from ropf.bnb import NO_FIXING, BnbConfig, run as run_bnb
from ropf.chordal import dense_decomposition, is_chordal, merge_cliques, decompose, sparsity_graph
from ropf.conic import check_certificate, solve
from ropf.experiment import RunConfig, run_experiment
from ropf.local import rounding_baseline, solve_fixed, three_step
from ropf.matpower import Generator
from ropf.network import MaxKShunts, RopfProblem, evaluate_candidate, genmoves_active_power, relative_gap
from ropf.relaxation import Fixings, mccormick, solve_relaxation

import cache
from candidates import random_feasible
from planted import planted_infeasible, planted_optimal
from synthetic import radial_injection_case
from verdicts import criterion

GOLDEN = {"case14": 5371.50, "case30": 373.41, "case57": 25337.79, "case118": 86301.50}


@functools.lru_cache(maxsize=None)
def shunt_rows(variant="MAXkshunts", u0="relaxation"):
    cases = ("case14", "case30", "case57") if variant == "MAXkmoves" else cache.DESK
    rows = run_experiment(RunConfig(list(cases), variant=variant, u0=u0, timings=False))
    return {r.instance: r for r in rows}


def best_ub(row):
    return row.ub if row.bnb_ub is None else min(row.ub, row.bnb_ub)


# 1 -------------------------------------------------------------------------

def test_c01_golden_objectives():
    with criterion(1, "golden objectives, MAXkshunts k=4") as note:
        rows = shunt_rows()
        for name, target in GOLDEN.items():
            r = rows[name]
            ub = best_ub(r)
            gap = relative_gap(ub, r.lb)
            note.append(f"{name} UB {ub:.2f} gap {gap:.1e}")
            assert abs(ub - target) <= 1e-3 * target, f"{name}: UB {ub} vs {target}"
            assert gap <= 1e-4, f"{name}: gap {gap}"
        assert rows["case30"].lb >= 373.39 * (1 - 1e-3)
        for r in rows.values():
            assert evaluate_candidate(cache.problem(r.instance), r.candidate).feasible


# 2 -------------------------------------------------------------------------

def test_c02_moves_reduce_to_shunts():
    with criterion(2, "MAXkmoves with u0=0 matches MAXkshunts") as note:
        ks, km = shunt_rows(), shunt_rows("MAXkmoves", "zeros")
        for name in ("case14", "case30", "case57"):
            a, b = best_ub(ks[name]), best_ub(km[name])
            note.append(f"{name} {a:.4f}/{b:.4f}")
            assert abs(a - b) <= 1e-6 * abs(a), f"{name}: {a} vs {b}"


# 3 -------------------------------------------------------------------------

def enumeration(p):
    best = math.inf
    for bits in itertools.product((0, 1), repeat=len(p.shunts)):
        if sum(bits) <= p.variant.k:
            best = min(best, solve_fixed(p, Fixings(dict(zip(p.shunts, bits)))).objective)
    return best


def oracle_check(name, root=None, first=None, deco=None):
    p = cache.problem(name)
    assert len(p.shunts) <= 4
    enum = enumeration(p)
    # literal strict pruning (LB > UB) so the search cannot stop on a tolerance
    res = run_bnb(p, BnbConfig(thresholds=NO_FIXING, gap_tol=0.0), root=root, first=first, deco=deco)
    return res, enum


@pytest.mark.parametrize("name", ["case14", "case30", "case57"])
def test_c03_bnb_matches_enumeration(name):
    with criterion(3, "B&B without fixing equals enumeration", name) as note:
        res, enum = oracle_check(name, cache.root(name), cache.first_ub(name), cache.deco(name))
        note.append(f"UB {res.ub:.6f} enum {enum:.6f} nodes {res.nodes}")
        assert abs(res.ub - enum) <= 1e-6 * abs(enum)


@pytest.mark.slow
def test_c03_bnb_matches_enumeration_activsg200():
    with criterion(3, "B&B without fixing equals enumeration", "case_ACTIVSg200") as note:
        res, enum = oracle_check("case_ACTIVSg200", deco=cache.deco("case_ACTIVSg200"))
        note.append(f"UB {res.ub:.6f} enum {enum:.6f} nodes {res.nodes}")
        assert abs(res.ub - enum) <= 1e-6 * abs(enum)


# 4 -------------------------------------------------------------------------

@pytest.mark.parametrize("name", cache.DESK)
def test_c04_weak_duality(name):
    with criterion(4, "root bound below feasible candidates", name) as note:
        p = cache.problem(name)
        lb = cache.root(name).lower_bound
        cands = random_feasible(p, 20, seed=4)
        assert len(cands) == 20, f"only {len(cands)} feasible candidates"
        bad = [obj for _, obj in cands if lb > obj + 1e-5 * abs(obj)]
        note.append(f"LB {lb:.2f}, {len(cands)} candidates, min {min(o for _, o in cands):.2f}")
        assert not bad, f"{len(bad)} violations"


# 5 -------------------------------------------------------------------------

@pytest.mark.parametrize("name", ["case14", "case30"])
def test_c05_decomposition_exact(name):
    with criterion(5, "clique-decomposed SDP equals dense SDP", name) as note:
        p = cache.problem(name)
        dense = solve_relaxation(p, dense_decomposition(p.net))
        lb = cache.root(name).lower_bound
        note.append(f"{lb:.8f} vs {dense.lower_bound:.8f}")
        assert dense.status == "optimal"
        assert abs(lb - dense.lower_bound) <= 1e-6 * abs(dense.lower_bound)


# 6 -------------------------------------------------------------------------

def test_c06_merging_structure():
    with criterion(6, "case118 merging reduces linking equalities") as note:
        net = cache.net("case118")
        g = sparsity_graph(net)
        raw = decompose(net, 0)
        merged = merge_cliques(raw, 1)
        note.append(f"links {raw.link_entries} -> {merged.link_entries}, cliques {len(raw.cliques)} -> {len(merged.cliques)}")
        assert merged.link_entries < raw.link_entries
        assert len(merged.cliques) <= len(raw.cliques)
        for d in (raw, merged):
            assert is_chordal(d.pattern()) and d.covers(g) and d.has_rip()


# 7 -------------------------------------------------------------------------

def test_c07_mccormick():
    with criterion(7, "McCormick planes hold and collapse at binary u") as note:
        rng = np.random.default_rng(7)
        buses = [b for name in cache.DESK for b in cache.net(name).buses.values()]
        worst = 0.0
        for bus in buses:
            lo, hi = bus.vmin**2, bus.vmax**2
            planes = mccormick((0.0, 1.0), (lo, hi))
            corners = [(u, V) for u in (0.0, 1.0) for V in (lo, hi)]
            inner = list(zip(rng.random(1000 - len(corners)), lo + (hi - lo) * rng.random(1000 - len(corners))))
            for u, V in corners + inner:
                worst = min(worst, min(pl.slack(u, V, u * V) for pl in planes))
            for u in (0.0, 1.0):
                for V in (lo, hi, 0.5 * (lo + hi)):
                    # both sides pinch xi to u*V
                    for xi in (u * V - 1e-6, u * V + 1e-6):
                        assert min(pl.slack(u, V, xi) for pl in planes) < 0
        note.append(f"{len(buses)} buses x 1000 samples, worst slack {worst:.1e}")
        assert worst >= -1e-12


# 8 -------------------------------------------------------------------------

def test_c08_genmoves_identities():
    with criterion(8, "GENmoves substitution identities") as note:
        rng = np.random.default_rng(8)
        worst = 0.0
        for _ in range(100):
            pmin = rng.uniform(0, 5)
            pmax = pmin + rng.uniform(0, 5)
            p0 = rng.uniform(pmin, pmax)
            g = Generator(1, pmin, pmax, -1.0, 1.0, 1.0, 0.0)
            errs = [
                genmoves_active_power(g, p0, 0.5, 0.5, 1, 0) - p0,
                genmoves_active_power(g, p0, 0.5, 0.5, 0, 1) - p0,
                genmoves_active_power(g, p0, 0.0, 0.5, 1, 0) - pmin,
                genmoves_active_power(g, p0, 0.5, 1.0, 0, 1) - pmax,
            ]
            worst = max(worst, max(abs(e) for e in errs))
        note.append(f"max error {worst:.1e}")
        assert worst <= 1e-12


# 9 / 10 (synthetic part) ---------------------------------------------------

@functools.lru_cache(maxsize=None)
def synthetic_run():
    net = cache.text_network(radial_injection_case(), "radial4")
    p = RopfProblem(net, MaxKShunts(3))
    deco = decompose(net)
    root = solve_relaxation(p, deco)
    first = three_step(p)
    res = run_bnb(p, BnbConfig(), root=root, first=first, deco=deco)
    return p, root, first, res


def replay(trace):
    """Re-run the node selection rule on the recorded trace; returns the mismatches."""
    open_nodes = [(0, 0, 0, {}, -math.inf)]  # depth, ones, seq, fixing, father_lb
    seq = 1
    errors = []
    for rec in trace:
        pick = max(open_nodes, key=lambda n: (n[0], n[1], n[2]))
        if pick[3] != rec.fixing:
            errors.append(f"node {rec.index}: expected {pick[3]}, got {rec.fixing}")
            break
        open_nodes.remove(pick)
        if rec.status == "branched":
            for val in (1, 0):
                fx = dict(rec.fixing)
                fx[rec.branch] = val
                open_nodes.append((rec.depth + 1, sum(fx.values()), seq, fx, rec.lb))
                seq += 1
        open_nodes = [n for n in open_nodes if not n[4] > rec.ub - 1e-4 * abs(rec.ub)]
    return errors


def test_c09_bnb_semantics():
    with criterion(9, "B&B trace: DFS, u=1 child first, argmax branching") as note:
        p, root, first, res = synthetic_run()
        frac = {s: x for s, x in root.u.items() if 1e-4 < x < 1 - 1e-4}
        assert root.status == "optimal" and len(frac) == 3, f"root u* {root.u}"
        tr = res.trace
        assert not replay(tr), replay(tr)
        fixings = [r.fixing for r in tr]
        branched = [r for r in tr if r.status == "branched"]
        assert branched
        for r in branched:
            free = {s: x for s, x in r.u.items() if s not in r.fixing}
            assert r.branch == max(sorted(free), key=lambda s: free[s])
            kids = [{**r.fixing, r.branch: v} for v in (1, 0)]
            assert all(k in fixings for k in kids)
            pos = fixings.index(r.fixing)
            assert fixings[pos + 1] == kids[0]
        assert len(tr) == 1 + 2 * len(branched)
        note.append(f"root u* {{{', '.join(f'{s}: {x:.3f}' for s, x in sorted(root.u.items()))}}}, "
                    f"{len(tr)} nodes, branching order {[r.branch for r in branched]}")


def test_c10_rounding_parity():
    with criterion(10, "rounding baseline parity and a B&B win") as note:
        p = cache.problem("case118")
        r = rounding_baseline(p, cache.root("case118"))
        note.append(f"case118 rounding {r.objective:.2f}")
        assert abs(r.objective - 86301.52) <= 1e-3 * 86301.52
        sp, sroot, _, res = synthetic_run()
        rnd = rounding_baseline(sp, sroot)
        note.append(f"synthetic B&B {res.ub:.2f} vs rounding {rnd.objective}")
        assert res.ub < rnd.objective
        assert evaluate_candidate(sp, res.candidate).feasible


# 11 ------------------------------------------------------------------------

def test_c11_conic_certification():
    with criterion(11, "conic IPM on planted programs") as note:
        rng = np.random.default_rng(11)
        worst = 0.0
        for i in range(50):
            prog, opt = planted_optimal(rng)
            sol = solve(prog, tol=1e-7)
            rep = check_certificate(prog, sol, tol=1e-7)
            assert sol.optimal and rep.ok, f"program {i}: {sol.status}"
            worst = max(worst, rep.primal, rep.dual, rep.gap)
            assert abs(sol.primal_objective - opt) <= 1e-7 * (1 + abs(opt)) * 10, f"program {i}"
        for i in range(10):
            prog = planted_infeasible(rng)
            sol = solve(prog, tol=1e-7)
            assert sol.status == "primal-infeasible", f"infeasible {i}: {sol.status}"
            assert check_certificate(prog, sol, tol=1e-7).ok
        note.append(f"50 optimal, worst residual {worst:.1e}; 10 infeasible certified")
