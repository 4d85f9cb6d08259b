import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from powernet.errors import NotSolved
from powernet.network import Hyperbolic, ScaledSquare
from powernet.solver import INFEASIBLE, OPTIMAL, UNBOUNDED, kkt_report, residuals, solve
from powernet.transcription import build_relaxation, relax_converter

from helpers import reference_solve
from socp import program, random_socp


def cone_rows(template):
    enc = relax_converter(template)
    return enc.G_loc, enc.h  # G z + s = h with z = [u, y]


# ---- worked examples --------------------------------------------------------


def test_pinned_input_makes_cone_tight():
    G, h = cone_rows(ScaledSquare(1.0))  # y >= u^2, the half-convention with m = 2
    sol = solve(program([0.0, 1.0], [[1.0, 0.0]], [1.0], G, h, {"l": 0, "q": [3]}))
    assert sol.status == OPTIMAL
    np.testing.assert_allclose(sol.primal, [1.0, 1.0], atol=1e-7)


def test_hyperbolic_minimum_on_the_boundary():
    # min u + y  s.t.  y (u + 1) >= 1, 0 <= u <= 2, y >= 0
    Gc, hc = cone_rows(Hyperbolic(1.0))
    G = np.vstack([[[-1.0, 0.0], [1.0, 0.0], [0.0, -1.0]], Gc])
    h = np.concatenate([[0.0, 2.0, 0.0], hc])
    sol = solve(program([1.0, 1.0], np.zeros((0, 2)), [], G, h, {"l": 3, "q": [3]}))
    assert sol.status == OPTIMAL
    assert sol.pobj == pytest.approx(1.0, abs=1e-8)
    # u + 1/(1+u) = 1 + u^2 + O(u^3) is flat at u = 0, so u* is only fixed to sqrt(tol)
    np.testing.assert_allclose(sol.primal, [0.0, 1.0], atol=1e-4)


def test_infeasible_certificate():
    # y <= -1 and y >= 0
    sol = solve(program([1.0], np.zeros((0, 1)), [], [[1.0], [-1.0]], [-1.0, 0.0],
                        {"l": 2, "q": []}))
    assert sol.status == INFEASIBLE
    # Farkas: G'z = 0, h'z < 0, z >= 0
    z = sol.cone_dual
    assert np.all(z >= -1e-9) and abs(z[0] - z[1]) < 1e-8 and -z[0] < 0


def test_unbounded_certificate():
    sol = solve(program([-1.0], np.zeros((0, 1)), [], [[-1.0]], [0.0], {"l": 1, "q": []}))
    assert sol.status == UNBOUNDED


def test_iteration_limit_returns_best_iterate(cvem10):
    sol = solve(build_relaxation(cvem10), max_iter=3)
    assert sol.status == "max_iter" and np.all(np.isfinite(sol.primal))


# ---- KKT report -------------------------------------------------------------


def test_cvem_stationarity(cvem10):
    cp = build_relaxation(cvem10)
    sol = solve(cp)
    rep = kkt_report(cp, sol)
    assert rep["stationarity"] <= 10 * 1e-8 * (1 + np.abs(cp.c).max())
    assert rep["min_reduced_cost"] >= -1e-7


def test_perturbed_duals_shift_stationarity_by_G(cvem10):
    cp = build_relaxation(cvem10)
    sol = solve(cp)
    base = kkt_report(cp, sol)
    eq = sol.eq_dual.copy()
    eq[cp.node_rows.ravel()] += 0.1
    bumped = kkt_report(cp, replace(sol, eq_dual=eq))
    shift = np.abs(0.1 * cvem10.G.sum(axis=0)).max()
    assert bumped["stationarity"] == pytest.approx(shift, abs=base["stationarity"] + 1e-12)


def test_report_needs_optimal_status(cvem10):
    cp = build_relaxation(cvem10)
    with pytest.raises(NotSolved):
        kkt_report(cp, solve(cp, max_iter=2))


def test_cone_and_node_reduced_costs_agree(eco20):
    sol = solve(build_relaxation(eco20))
    np.testing.assert_allclose(sol.cone_reduced_costs(), sol.output_reduced_costs(), atol=1e-6)


# ---- invariants -------------------------------------------------------------


def in_cones(v, dims, tol):
    l = dims["l"]
    if l and v[:l].min() < -tol:
        return False
    i = l
    for q in dims["q"]:
        if v[i] - np.linalg.norm(v[i + 1:i + q]) < -tol:
            return False
        i += q
    return True


@settings(max_examples=25)
@given(seed=st.integers(0, 2**32 - 1))
def test_random_socp_certificates(seed):
    cp = random_socp(np.random.default_rng(seed), n_max=60)
    sol = solve(cp)
    assert sol.status == OPTIMAL
    assert max(sol.primal_res, sol.dual_res, sol.rel_gap) <= 1e-8
    # recomputed independently of the solver's own bookkeeping
    pres, dres, gap, pobj, dobj = residuals(cp, sol.primal, sol.eq_dual, sol.cone_dual, sol.slack)
    assert max(pres, dres, gap) <= 1e-8
    assert dobj <= pobj + 10 * 1e-8 * (1 + abs(pobj))
    scale = 1 + np.abs(cp.h).max()
    assert in_cones(cp.h - cp.G @ sol.primal, cp.dims, sol.primal_res * scale + 1e-12)
    assert in_cones(sol.cone_dual, cp.dims, 1e-12)


def test_deterministic_iterates():
    cp = random_socp(np.random.default_rng(11))
    a, b = solve(cp), solve(cp)
    assert np.array_equal(a.primal, b.primal) and np.array_equal(a.eq_dual, b.eq_dual)
    assert a.iterations == b.iterations


@settings(max_examples=10)
@given(seed=st.integers(0, 2**32 - 1))
def test_cost_scaling_keeps_the_optimal_set(seed):
    cp = random_socp(np.random.default_rng(seed), n_max=40)
    a = solve(cp)
    b = solve(replace(cp, c=10.0 * cp.c))
    assert b.pobj == pytest.approx(10.0 * a.pobj, rel=1e-7, abs=1e-7)
    # each argmin is optimal for the other program (optimal faces need not be points)
    assert cp.c @ b.primal == pytest.approx(a.pobj, rel=1e-7, abs=1e-7)


def test_cost_scaling_on_a_unique_optimum(cvem10):
    cp = build_relaxation(cvem10)
    a = solve(cp)
    b = solve(replace(cp, c=10.0 * cp.c))
    scale = 1 + np.abs(a.primal).max()
    np.testing.assert_allclose(b.primal, a.primal, atol=1e-6 * scale)
    np.testing.assert_allclose(b.node_duals(), 10.0 * a.node_duals(), rtol=1e-5, atol=1e-6)


def test_eco_solve_duality_chain(eco20):
    sol = solve(build_relaxation(eco20))
    assert sol.optimal
    assert sol.dobj <= sol.pobj + 10 * 1e-8 * (1 + abs(sol.pobj))


def test_solution_json(cvem10):
    sol = solve(build_relaxation(cvem10))
    d = json.loads(sol.to_json(include_vectors=True))
    assert d["status"] == OPTIMAL and len(d["primal"]) == sol.primal.size


# ---- external backend ------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_agrees_with_external_backend(seed):
    pytest.importorskip("cvxpy")
    cp = random_socp(np.random.default_rng(100 + seed), n_max=80)
    ours, ref = solve(cp), reference_solve(cp)
    assert ref.status == OPTIMAL
    assert abs(ours.pobj - ref.pobj) <= 1e-6 * (1 + abs(ref.pobj))


def test_external_backend_on_network(eco20):
    pytest.importorskip("cvxpy")
    cp = build_relaxation(eco20)
    ref = solve(cp, backend="clarabel")
    assert ref.status == OPTIMAL
    assert solve(cp).pobj == pytest.approx(ref.pobj, rel=1e-6)
    # dual sign convention matches the embedded solver
    assert ref.dual_res <= 1e-6
