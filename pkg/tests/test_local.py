import copy
import itertools
import math

import pytest

import ropf.local as local
from ropf.local import (
    BINARY_TOL,
    FEAS_TOL,
    INFEASIBLE,
    initial_shunt_state,
    round_shunts,
    rounding_baseline,
    solve_continuous,
    solve_fixed,
    solve_mpec,
    three_step,
)
from ropf.network import MaxKMoves, MaxKShunts, RopfProblem, evaluate_candidate
from ropf.relaxation import Fixings, RelaxationPoint

import cache
from synthetic import radial_injection_case


def fake_point(u):
    return RelaxationPoint(0.0, dict(u), {s: 1.0 for s in u}, "optimal")


class _Recorder:
    def __init__(self):
        self.calls = []

    def __call__(self, p, fix, start=None):
        self.calls.append(dict(fix.u))
        return local._infeasible()


def _fake_problem(shunts, variant):
    class P:
        pass

    p = P()
    p.shunts = list(shunts)
    p.variant = variant
    return p


def test_rounding_threshold_rule(monkeypatch):
    rec = _Recorder()
    monkeypatch.setattr(local, "solve_fixed", rec)
    p = _fake_problem([1, 2, 3], MaxKShunts(4))
    rounding_baseline(p, fake_point({1: 0.9, 2: 0.6, 3: 0.4}))
    assert rec.calls == [{1: 1, 2: 1, 3: 0}]


def test_rounding_keeps_k_largest(monkeypatch):
    rec = _Recorder()
    monkeypatch.setattr(local, "solve_fixed", rec)
    p = _fake_problem([1, 2, 3, 4, 5], MaxKShunts(4))
    rounding_baseline(p, fake_point({1: 0.9, 2: 0.8, 3: 0.7, 4: 0.6, 5: 0.55}))
    assert rec.calls == [{1: 1, 2: 1, 3: 1, 4: 1, 5: 0}]


def test_rounding_needs_optimal_point():
    bad = RelaxationPoint(math.nan, {}, {}, "numerical-failure")
    with pytest.raises(ValueError):
        rounding_baseline(cache.problem("case14"), bad)


def test_round_shunts_ties_up_and_repairs_moves():
    p = _fake_problem([1, 2, 3], MaxKShunts(1))
    assert round_shunts(p, {1: 0.5, 2: 0.7, 3: 0.1}) == {1: 0, 2: 1, 3: 0}
    p = _fake_problem([1, 2], MaxKShunts(2))
    assert round_shunts(p, {1: 0.5, 2: 0.49}) == {1: 1, 2: 0}
    p = _fake_problem([1, 2, 3], MaxKMoves(1, {1: 1, 2: 0, 3: 0}))
    assert round_shunts(p, {1: 0.1, 2: 0.6, 3: 0.2}) == {1: 0, 2: 0, 3: 0}


def test_three_step_dispatch_when_all_fixed(monkeypatch):
    rec = _Recorder()
    monkeypatch.setattr(local, "solve_fixed", rec)
    p = cache.problem("case30")
    three_step(p, Fixings({s: 0 for s in p.shunts}))
    assert len(rec.calls) == 1


def test_case14_fixed_best_of_both():
    p = cache.problem("case14")
    (s,) = p.shunts
    res = [solve_fixed(p, Fixings({s: v})) for v in (0, 1)]
    best = min(r.objective for r in res)
    assert best == pytest.approx(5371.50, rel=1e-3)
    for r in res:
        if r.ok:
            assert evaluate_candidate(p, r.candidate, FEAS_TOL).feasible


def test_partial_fixing_rejected():
    p = cache.problem("case30")
    with pytest.raises(ValueError):
        solve_fixed(p, Fixings({p.shunts[0]: 0}))


def test_warm_start_never_worse():
    p = cache.problem("case30")
    fix = Fixings({s: 0 for s in p.shunts})
    r0 = solve_fixed(p, fix)
    assert r0.ok
    r1 = solve_fixed(p, fix, start=r0.candidate)
    assert r1.objective <= r0.objective + 1e-9


def test_budget_violated_by_fixing_is_infeasible():
    p = RopfProblem(cache.net("case30"), MaxKShunts(0))
    r = solve_fixed(p, Fixings({s: 1 for s in p.shunts}))
    assert r.status == INFEASIBLE and r.objective == math.inf


def test_continuous_case30():
    p = cache.problem("case30")
    r = solve_continuous(p)
    assert r.ok and r.violation <= FEAS_TOL
    enum = min(solve_fixed(p, Fixings(dict(zip(p.shunts, bits)))).objective
               for bits in itertools.product((0, 1), repeat=len(p.shunts)))
    assert r.objective <= enum + 1e-6 * abs(enum)


def test_continuous_without_shunts_matches_fixed():
    net = cache.text_network(radial_injection_case(gs=0.0), "noshunt")
    assert net.shunt_buses == []
    p = RopfProblem(net, MaxKShunts(4))
    a, b = solve_continuous(p), solve_fixed(p, Fixings())
    assert a.objective == pytest.approx(b.objective, rel=1e-9)
    assert initial_shunt_state(net) == {}


def test_mpec_binary_start_returns_at_once():
    p = cache.problem("case14")
    start = cache.first_ub("case14").candidate
    r = solve_mpec(p, start)
    assert r.solves == 0 and r.candidate is start


def test_mpec_from_half_reaches_binary():
    p = cache.problem("case14")
    (s,) = p.shunts
    start = copy.deepcopy(solve_continuous(p).candidate)
    start.u[s] = 0.5
    r = solve_mpec(p, start)
    assert min(r.candidate.u[s], 1 - r.candidate.u[s]) <= BINARY_TOL
    trace = r.info["penalty"]
    assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))


@pytest.mark.parametrize("name,target", [("case14", 5371.50), ("case30", 373.41), ("case57", 25337.79)])
def test_three_step_golden(name, target):
    r = cache.first_ub(name)
    assert r.ok
    assert r.objective == pytest.approx(target, rel=1e-3)
    assert evaluate_candidate(cache.problem(name), r.candidate, FEAS_TOL).feasible
    lb = cache.root(name).lower_bound
    assert r.objective >= lb - 1e-5 * abs(r.objective)


def test_initial_shunt_state_deterministic():
    net = cache.net("case30")
    a, b = initial_shunt_state(net), initial_shunt_state(net)
    assert a == b
    assert set(a) == set(net.shunt_buses) and set(a.values()) <= {0, 1}
