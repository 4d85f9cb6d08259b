import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from powernet import scenarios as sc
from powernet.checker import (
    CERTIFIED, FAIL, RANK_TOL, SAMPLED, check_convexity, check_licq, check_monotonic_output,
    check_network_structure, check_rank, check_requirements, numerical_rank, psi_matrix,
    rank_margin, sample_manifold_points, stacked_xi,
)
from powernet.errors import SingularOutputDerivative
from powernet.network import (
    DISSIPATIVE, Converter, Hyperbolic, Linear, Node, PowerNetwork, Quadratic, ScaledSquare,
)

from helpers import eco_small

# velocity and lethargy rows of the eco-driving network, inputs (em, v, leth)
F_ECO = np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
G_ECO = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])


def eco_dydu(u_v, u_l):
    return np.array([0.0, u_v, -1.0 / u_l**2])


# ---- requirement i ---------------------------------------------------------


def test_psd_quadratic_is_certified():
    conv = Converter(Quadratic(np.diag([0.2, 0.0]), [0.0, -1.0]), u_lo=[-1.0], u_hi=[1.0])
    assert check_convexity(conv).state == CERTIFIED


def test_concave_polynomial_fails_with_witness_in_box():
    conv = Converter(Quadratic.from_poly(-0.1, 1.0, 0.0), u_lo=[0.0], u_hi=[4.0])
    st_ = check_convexity(conv)
    assert st_.state == FAIL
    # midpoint of two manifold points lies outside the relaxed set
    assert st_.witness["h"] > 0
    assert 0.0 <= float(np.ravel(st_.witness["z"])[0]) <= 4.0


def test_hyperbolic_positive_box_is_certified():
    conv = Converter(Hyperbolic(0.0), u_lo=[0.01], u_hi=[50.0])
    assert check_convexity(conv).state == CERTIFIED


def test_hyperbolic_box_across_pole_fails():
    st_ = check_convexity(Converter(Hyperbolic(0.5), u_lo=[-2.0], u_hi=[2.0]))
    assert st_.state == FAIL and st_.witness["z"] == [-0.5]


def test_linear_and_convex_square_are_certified():
    assert check_convexity(Converter(Linear([2.0]))).state == CERTIFIED
    assert check_convexity(Converter(ScaledSquare(0.3))).state == CERTIFIED


# ---- requirement ii --------------------------------------------------------


def test_scaled_square_is_monotonic():
    st_ = check_monotonic_output(Converter(ScaledSquare(1.0)))
    assert st_.state == CERTIFIED and "-1" in st_.detail


def test_hyperbolic_monotonic_on_positive_box():
    st_ = check_monotonic_output(Converter(Hyperbolic(0.1), u_lo=[0.0], u_hi=[3.0]))
    assert st_.state == CERTIFIED


def test_hyperbolic_box_straddling_pole_gives_boundary_witness():
    st_ = check_monotonic_output(Converter(Hyperbolic(0.1), u_lo=[-1.0], u_hi=[3.0]))
    assert st_.state == FAIL
    assert st_.witness["z"] == [-0.1] and st_.witness["dh_dy"] == 0.0


def test_output_quadratic_in_y_is_sampled():
    # h = 0.5 (u^2 + y^2) - 2 - y has dh/dy = y - 1 and fails on the lower root
    conv = Converter(Quadratic(np.eye(2), [0.0, -1.0], -2.0), u_lo=[-1.0], u_hi=[1.0])
    st_ = check_monotonic_output(conv)
    assert st_.state == FAIL and st_.witness["dh_dy"] >= 0


# ---- requirements iii and iv ---------------------------------------------


def test_eco_network_structure_passes(eco20):
    out = check_network_structure(eco20)
    assert all(s.state == CERTIFIED for s in out.values())


def test_state_entry_on_output_node_is_a_self_loop(eco20):
    j = eco20.node_names.index("lethargy")
    E = eco20.E.copy()
    # the kinetic converter reads no state, so couple the lethargy converter to its own input
    F = eco20.F.copy()
    F[j, eco20.u_names.index("leth")] = 1.0
    out = check_network_structure(replace(eco20, E=E, F=F))
    assert out["iv_no_self_loop"].state == FAIL
    assert out["iv_no_self_loop"].witness == {"node": "lethargy", "converter": "leth"}


def test_negative_output_cost_fails(eco20):
    b = eco20.b.copy()
    b[eco20.converter_index("em")] = -1.0
    out = check_network_structure(replace(eco20, b=b))
    assert out["iii_positivity"].state == FAIL
    assert out["iii_positivity"].witness["converter"] == "em"


# ---- requirement v ---------------------------------------------------------


def test_rank_of_eco_matrices_at_positive_speed():
    rank, sJ, _ = rank_margin(F_ECO, G_ECO, eco_dydu(10.0, 0.1))
    assert rank == 2 and sJ > 0


def test_rank_of_eco_matrices_at_standstill():
    rank, sJ, _ = rank_margin(F_ECO, G_ECO, eco_dydu(0.0, 0.1))
    assert rank == 1 and sJ == 0.0


@given(u_v=st.floats(-50.0, 50.0), u_l=st.floats(0.02, 2.0))
def test_eco_determinant_identity(u_v, u_l):
    # the nonzero 2x2 minor is u_v dy_l/du_l
    Mx = F_ECO + G_ECO @ np.diag(eco_dydu(u_v, u_l))
    minor = np.linalg.det(Mx[:, 1:])
    assert minor == pytest.approx(-u_v / u_l**2, rel=1e-12, abs=1e-300)
    rank = rank_margin(F_ECO, G_ECO, eco_dydu(u_v, u_l))[0]
    if u_v == 0.0:
        assert rank == 1
    elif abs(minor) >= 10 * RANK_TOL * np.sum(Mx**2):
        # sigma_J / sigma_1 = |minor| / sigma_1^2 >= |minor| / ||Mx||_F^2, clear of the threshold
        assert rank == 2


def test_no_outputs_in_nodes_is_certified():
    net = PowerNetwork()
    for i in range(2):
        net.add_converter(Converter(ScaledSquare(1.0), u_lo=[0.0], u_hi=[1.0], name=f"c{i}"))
    net.add_node(Node(f={0: 1.0}, kind=DISSIPATIVE))
    net.add_node(Node(f={1: 1.0}, kind=DISSIPATIVE))
    rep = check_rank(net.assemble(3))
    assert rep.statuses["v_rank"].state == CERTIFIED


def test_eco_rank_passes_with_positive_speed(eco20):
    rep = check_rank(eco20)
    assert rep.statuses["v_rank"].state == SAMPLED
    assert rep.rank_margin > 0


def test_eco_rank_fails_at_zero_speed_with_witness():
    p = eco_small(K=5, bounds=sc.EcoBounds(kin_input_min=0.0))
    rep = check_requirements(p)
    v = rep.statuses["v_rank"]
    assert v.state == FAIL and v.witness["u"]["v"] == 0.0
    assert rep.failed_names() == ["v_rank"]


def test_random_sampling_is_seeded(eco20):
    a = check_rank(eco20, sampling="random", n=64, seed=5)
    b = check_rank(eco20, sampling="random", n=64, seed=5)
    assert a.rank_margin == b.rank_margin


def test_unbounded_box_needs_clip():
    net = PowerNetwork()
    net.add_converter(Converter(Hyperbolic(0.0), u_lo=[0.1]))
    net.add_converter(Converter(ScaledSquare(1.0), u_lo=[0.0], u_hi=[1.0]))
    net.add_node(Node(f={1: 1.0}, g={0: 1.0}, kind=DISSIPATIVE))
    p = net.assemble(2)
    with pytest.raises(ValueError):
        check_rank(p)
    assert check_rank(p, clip=10.0).passed


# ---- constraint qualification ---------------------------------------------


def test_eco_licq_passes():
    rep = check_licq(eco_small(K=5), direct=True)
    assert rep.passed
    assert rep.statuses["licq_direct"].state == SAMPLED


def test_stacked_xi_has_full_row_rank_on_small_net():
    p = sc.random_network(np.random.default_rng(1), K=3)
    x, u, y = sample_manifold_points(p, 1, seed=2)[0]
    Xi = stacked_xi(p, x, u, y)
    assert Xi.shape[0] == p.K * p.M + (p.K + 1) * p.n_x + p.K * p.J
    assert numerical_rank(Xi) == Xi.shape[0]


def test_reduction_matches_stacked_rank():
    # Xi is full row rank iff the reduced matrix Psi is
    p = sc.random_network(np.random.default_rng(4), K=3)
    for x, u, y in sample_manifold_points(p, 3, seed=0):
        Xi = stacked_xi(p, x, u, y)
        Psi = psi_matrix(p, x, u, y)
        assert (numerical_rank(Xi) == Xi.shape[0]) == (numerical_rank(Psi) == Psi.shape[0])


def test_vanishing_output_derivative_is_rejected():
    net = PowerNetwork()
    net.add_converter(Converter(Quadratic(np.diag([1.0, 0.0]), [0.0, 0.0]), u_lo=[0.0],
                                u_hi=[1.0], name="flat"))
    net.add_converter(Converter(ScaledSquare(1.0), u_lo=[0.0], u_hi=[1.0]))
    net.add_node(Node(f={1: 1.0}, g={0: 1.0}, kind=DISSIPATIVE))
    with pytest.raises(SingularOutputDerivative):
        check_licq(net.assemble(2))


@settings(max_examples=15)
@given(seed=st.integers(0, 2**16), K=st.integers(1, 10))
def test_licq_pass_implies_full_rank_xi(seed, K):
    p = sc.random_network(np.random.default_rng(seed), K=K)
    rep = check_licq(p, clip=10.0)
    if not rep.passed:
        return
    for x, u, y in sample_manifold_points(p, 10, seed=seed):
        Xi = stacked_xi(p, x, u, y)
        assert numerical_rank(Xi) == Xi.shape[0]


@settings(max_examples=20)
@given(seed=st.integers(0, 2**16),
       scale=st.lists(st.floats(1e-3, 1e3), min_size=2, max_size=2))
def test_row_scaling_leaves_outcomes_unchanged(seed, scale):
    p = sc.random_network(np.random.default_rng(seed), K=2)
    D = np.asarray(scale)[:, None]
    q = replace(p, E=p.E * D, F=p.F * D, G=p.G * D, v=p.v * D.T)
    a = check_requirements(p, clip=10.0, n=64)
    b = check_requirements(q, clip=10.0, n=64)
    assert {k: s.state for k, s in a.statuses.items()} == \
        {k: s.state for k, s in b.statuses.items()}


def test_report_serializes_to_json():
    rep = check_requirements(eco_small(K=5, bounds=sc.EcoBounds(kin_input_min=0.0)))
    d = json.loads(rep.to_json())
    assert d["requirements"]["v_rank"]["state"] == FAIL
    assert d["requirements"]["v_rank"]["witness"]["u"]["v"] == 0.0
