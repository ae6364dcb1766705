import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from ropf.conic import ConicProgram, check_certificate, smat, solve, svec, svec_index

from planted import planted_infeasible, planted_optimal


TOL = 1e-7


def within(got, want, tol=TOL):
    # the stopping rule bounds the gap by tol * (1 + |objective|)
    return abs(got - want) <= tol * (1 + abs(want))


def lp_min_x_ge_2():
    # min x  s.t. x - s = 2, x a 1x1 psd block, s >= 0
    return ConicProgram.from_triplets([0.0, 1.0], [0, 0], [1, 0], [1.0, -1.0], [2.0], nonneg=1, psd=(1,))


def trace_sdp():
    # min tr X  s.t. X_11 = 1, X_12 = 2, X psd 2x2  ->  X_22 = 4, optimum 5
    d = 2
    rows = [0, 1]
    cols = [svec_index(d, 0, 0), svec_index(d, 1, 0)]
    vals = [1.0, 1.0 / np.sqrt(2)]
    return ConicProgram.from_triplets(svec(np.eye(2)), rows, cols, vals, [1.0, 2.0], psd=(2,))


def test_one_dimensional_lp():
    sol = solve(lp_min_x_ge_2())
    assert sol.status == "optimal"
    assert within(sol.primal_objective, 2.0)
    assert check_certificate(lp_min_x_ge_2(), sol).ok


def test_trace_example():
    sol = solve(trace_sdp())
    assert sol.optimal
    assert within(sol.primal_objective, 5.0)
    X = smat(sol.x, 2)
    assert X[1, 1] == pytest.approx(4.0, abs=1e-5)
    assert sol.dual_objective <= sol.primal_objective + TOL * (1 + abs(sol.primal_objective))


def test_infeasible_lp_certificate():
    # x >= 1 and x <= 0 on x >= 0: x - s1 = 1, x + s2 = 0
    prog = ConicProgram.from_triplets([1.0, 0, 0], [0, 0, 1, 1], [0, 1, 0, 2], [1.0, -1.0, 1.0, 1.0], [1.0, 0.0], nonneg=3)
    sol = solve(prog)
    assert sol.status == "primal-infeasible"
    assert check_certificate(prog, sol).ok


def test_unbounded_lp_certificate():
    # min -x, x - s = 0, both >= 0
    prog = ConicProgram.from_triplets([-1.0, 0.0], [0, 0], [0, 1], [1.0, -1.0], [0.0], nonneg=2)
    sol = solve(prog)
    assert sol.status == "dual-infeasible"
    assert check_certificate(prog, sol).ok


def test_corrupted_solution_is_rejected():
    prog = trace_sdp()
    sol = solve(prog)
    assert check_certificate(prog, sol).ok
    sol.x = sol.x.copy()
    sol.x[0] += 1.0
    assert check_certificate(prog, sol).primal > TOL
    assert not check_certificate(prog, sol).ok
    sol = solve(prog)
    sol.y = sol.y - 1e-2
    assert not check_certificate(prog, sol).ok


def test_svec_roundtrip_and_inner_product():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((4, 4))
    A = A + A.T
    B = rng.standard_normal((4, 4))
    B = B + B.T
    assert np.allclose(smat(svec(A)), A)
    assert svec(A) @ svec(B) == pytest.approx(np.sum(A * B))
    v = svec(A)
    for i in range(4):
        for j in range(4):
            k = svec_index(4, i, j)
            assert v[k] == pytest.approx(A[i, j] * (1 if i == j else np.sqrt(2)))


def test_shape_checks():
    with pytest.raises(ValueError):
        ConicProgram(np.zeros(3), sp.csr_matrix((1, 2)), np.zeros(1), nonneg=2)


@pytest.mark.parametrize("seed", range(8))
def test_planted_optimal(seed):
    prog, opt = planted_optimal(np.random.default_rng(100 + seed))
    sol = solve(prog)
    assert sol.optimal
    assert within(sol.primal_objective, opt)
    assert max(sol.residuals.values()) <= TOL
    assert check_certificate(prog, sol).ok


@pytest.mark.parametrize("seed", range(4))
def test_planted_infeasible(seed):
    prog = planted_infeasible(np.random.default_rng(200 + seed))
    sol = solve(prog)
    assert sol.status == "primal-infeasible"
    assert check_certificate(prog, sol).ok


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.1, 10.0, 100.0]))
def test_objective_scaling(seed, factor):
    prog, opt = planted_optimal(np.random.default_rng(seed))
    a, b = solve(prog), solve(prog.scaled(factor))
    assert a.status == b.status == "optimal"
    # each solve is within tol * (1 + |obj|) of its own optimum
    slack = TOL * (1 + abs(factor * opt)) + factor * TOL * (1 + abs(opt))
    assert abs(b.primal_objective - factor * a.primal_objective) <= slack
    assert within(a.primal_objective, opt) and within(b.primal_objective, factor * opt)


def test_deterministic():
    prog, _ = planted_optimal(np.random.default_rng(7))
    a, b = solve(prog), solve(prog)
    assert a.iterations == b.iterations
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
