import numpy as np
import pytest

from powernet import scenarios as sc
from powernet.exactness import feasibility_violation, solve_exact
from powernet.network import DISSIPATIVE, Converter, Node, PowerNetwork, ScaledSquare
from powernet.oracle import GridSpec, anchored_grid, dp_solve, enumerate_toy

from helpers import cvem_small, eco_small


@pytest.fixture(scope="module")
def eco_exact(eco20):
    return solve_exact(eco20)[1].cost


@pytest.fixture(scope="module")
def cvem_exact(cvem10):
    return solve_exact(cvem10)[1].cost


# ---- grids -------------------------------------------------------------------


def test_anchored_grid_contains_anchor_and_nests():
    coarse, i0 = anchored_grid(1.0, 7.0, 51, 4.0)
    fine, j0 = anchored_grid(1.0, 7.0, 101, 4.0)
    assert coarse[i0] == 4.0 and fine[j0] == 4.0
    assert coarse.min() >= 1.0 - 1e-12 and coarse.max() <= 7.0 + 1e-12
    assert np.all(np.isclose(coarse[:, None], fine[None, :], rtol=0, atol=1e-12).any(axis=1))


def test_grid_spec_guards():
    with pytest.raises(ValueError):
        GridSpec((1,))
    with pytest.raises(ValueError):
        GridSpec((11,), interpolation="cubic")
    with pytest.raises(ValueError):
        GridSpec((11, 11), ranges=((0.0, 1.0),))


# ---- dynamic programming -----------------------------------------------------


def test_eco_dp_close_to_relaxation(eco20, eco_exact):
    r = dp_solve(eco20, GridSpec((201, 50)))
    assert r.value >= eco_exact - 1e-6
    assert (r.value - eco_exact) / abs(r.value) <= 0.02


def test_cvem_dp_close_to_relaxation(cvem10, cvem_exact):
    r = dp_solve(cvem10, GridSpec((201,)))
    assert r.value >= cvem_exact - 1e-6
    assert (r.value - cvem_exact) / abs(r.value) <= 0.02


@pytest.mark.parametrize("kind", ["eco", "cvem"])
def test_dp_gap_shrinks_under_refinement(kind, eco20, cvem10, eco_exact, cvem_exact):
    p, ref = (eco20, eco_exact) if kind == "eco" else (cvem10, cvem_exact)
    grids = [(51, 50), (101, 50), (201, 50)] if kind == "eco" else [(51,), (101,), (201,)]
    gaps = [dp_solve(p, GridSpec(g)).value - ref for g in grids]
    assert all(g >= -1e-6 for g in gaps)
    assert gaps[0] > gaps[1] > gaps[2]


def test_dp_trajectory_is_feasible_and_priced(cvem10, eco20):
    for p, g in ((cvem10, (101,)), (eco20, (51, 25))):
        r = dp_solve(p, GridSpec(g))
        assert feasibility_violation(p, r.trajectory) <= 1e-9
        assert p.cost(r.trajectory["u"], r.trajectory["y"]) == pytest.approx(r.value, rel=1e-12)


@pytest.mark.parametrize("demand", [0.0, 20e3, 45e3])
def test_single_step_cvem_matches_closed_form(demand):
    # charge sustaining over one step pins the battery, so the machine idles at y_em = 0
    p = cvem_small(v_p=[demand])
    a2, a1, a0 = 2e-3, 1.1, 0.2  # kW form of the machine map
    u_em = (-a1 + np.sqrt(a1**2 - 4 * a2 * a0)) / (2 * a2)
    u_f = demand / 1e3 - u_em
    expected = 1e-2 * u_f**2 + 2.5 * u_f + 1.0
    assert dp_solve(p, GridSpec((101,))).value == pytest.approx(expected, rel=1e-10)


def test_zero_horizon_costs_nothing(cvem10):
    r = dp_solve(cvem10, GridSpec((11,)), horizon=0)
    assert r.value == 0.0 and r.trajectory is None


def test_partial_horizon_is_cheaper(cvem10):
    full = dp_solve(cvem10, GridSpec((101,))).value
    assert dp_solve(cvem10, GridSpec((101,)), horizon=3).value < full


def test_dp_guards(cvem10):
    with pytest.raises(ValueError):
        dp_solve(cvem_small(v_p=np.full(101, 1e3)), GridSpec((11,)))
    with pytest.raises(ValueError):
        dp_solve(cvem10, GridSpec((11,)), horizon=11)
    with pytest.raises(ValueError):
        dp_solve(sc.toy_two_branch(), GridSpec((11,)))
    with pytest.raises(ValueError):
        dp_solve(sc.random_network(np.random.default_rng(0), K=2, n_buffers=3), GridSpec((11,)))


def test_dp_eco_respects_trip_time(eco20):
    r = dp_solve(eco20, GridSpec((51, 50)))
    assert r.trajectory["x"][-1, 1] <= eco20.meta["T_max"] + 1e-12
    slower = dp_solve(eco_small(T_max=12.0), GridSpec((51, 50)))
    assert slower.value <= r.value


# ---- enumeration ---------------------------------------------------------------------


def test_enumeration_matches_toy_optimum():
    p = sc.toy_two_branch()
    e = enumerate_toy(p, 41)
    assert e.value == pytest.approx(solve_exact(p)[1].cost, abs=1e-8)
    np.testing.assert_allclose(e.point["u"], [[1.5, 1.5]], atol=1e-12)


def test_enumeration_converges_at_first_order():
    # grids that miss u1 = 1.5 overshoot by at most the cost slope times one step
    p = sc.toy_two_branch()
    errs = []
    for n in (10, 20, 40, 80):
        h = 1.0 / (n - 1)
        err = enumerate_toy(p, n).value - 1.125
        assert 0.0 <= err <= 1.5 * h
        errs.append(err)
    assert errs == sorted(errs, reverse=True)


def test_infeasible_toy_has_empty_set():
    net = PowerNetwork()
    c = net.add_converter(Converter(ScaledSquare(1.0), u_lo=[0.0], u_hi=[1.0], cost_b=1.0))
    net.add_node(Node(f={net.converter_input(c): -1.0}, kind=DISSIPATIVE, load=-2.0))
    e = enumerate_toy(net.assemble(1), 21)
    assert e.empty and e.value == np.inf and e.point is None and e.n_points == 21


def test_enumeration_guards():
    with pytest.raises(ValueError):
        enumerate_toy(sc.toy_two_branch(), 1)
    with pytest.raises(ValueError):
        enumerate_toy(cvem_small(v_p=[1e3, 2e3]), 5)
    with pytest.raises(ValueError):
        enumerate_toy(sc.toy_two_branch(), GridSpec((2,), input_counts=(5,)))
    net = PowerNetwork()
    c = net.add_converter(Converter(ScaledSquare(1.0), u_lo=[0.0]))
    net.add_node(Node(f={net.converter_input(c): 1.0}, kind=DISSIPATIVE, load=1.0))
    with pytest.raises(ValueError):
        enumerate_toy(net.assemble(1), 5)


def test_enumeration_per_input_resolution():
    p = sc.toy_two_branch()
    e = enumerate_toy(p, GridSpec((2,), input_counts=(3, 5)))
    assert e.n_points == 15
