import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from powernet import scenarios as sc
from powernet.errors import NotRelaxable, RequirementUnmet
from powernet.network import Hyperbolic, Linear, Quadratic, ScaledSquare
from powernet.solver import solve
from powernet.transcription import (
    add_regularization, build_relaxation, dump_program, load_program, output_indices,
    relax_converter,
)

from helpers import TEMPLATES, boundary_coincidence, cone_margin, cvem_small, eco_small, pack

# ---- converter encodings ---------------------------------------------------


def test_scaled_square_boundary_point():
    # m = 2 in the half-coefficient convention: 0.5 * 2 * 3^2 = 9
    enc = relax_converter(ScaledSquare(1.0))
    s = enc.slack([3.0], 9.0)
    assert s[0] == 9.5 and np.linalg.norm(s[1:]) == pytest.approx(np.sqrt(18 + 72.25), rel=1e-15)
    assert abs(cone_margin(enc, [3.0], 9.0)) < 1e-14


def test_hyperbolic_boundary_point():
    enc = relax_converter(Hyperbolic(0.0))
    s = enc.slack([2.0], 0.5)
    np.testing.assert_allclose(np.abs(s[1:]), [2.0, 1.5])
    assert s[0] == 2.5


def test_hyperbolic_interior_point():
    enc = relax_converter(Hyperbolic(0.0))
    assert cone_margin(enc, [2.0], 1.0) == pytest.approx(3.0 - np.sqrt(5.0), rel=1e-14)


def test_linear_is_a_single_inequality():
    enc = relax_converter(Linear([2.0, -1.0], 0.5))
    assert enc.kind == "lin" and enc.G_loc.shape == (1, 3)
    assert enc.contains([1.0, 1.0], 1.5) and not enc.contains([1.0, 1.0], 1.4)


def test_indefinite_quadratic_is_not_relaxable():
    Q = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 0.0]])
    with pytest.raises(NotRelaxable):
        relax_converter(Quadratic(Q, [0.0, 0.0, -1.0]))


def test_semidefinite_quadratic_degrades_to_cone():
    Q = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
    enc = relax_converter(Quadratic(Q, [0.0, 0.0, -1.0]))
    z = np.array([0.3, -0.7])
    y = float(Quadratic(Q, [0.0, 0.0, -1.0]).output(z))
    assert abs(cone_margin(enc, z, y)) < 1e-10




@pytest.mark.parametrize("name", sorted(TEMPLATES))
def test_encoding_boundary_coincides_with_manifold(name):
    tmpl, box = TEMPLATES[name]
    err, bad = boundary_coincidence(tmpl, np.random.default_rng(7), n=2000, box=box)
    assert err <= 1e-12 and bad == 0


@settings(max_examples=60)
@given(c=st.floats(0.01, 10.0), d=st.floats(-2.0, 2.0), u=st.floats(-5.0, 5.0),
       y=st.floats(-50.0, 50.0))
def test_scaled_square_membership_iff_inequality(c, d, u, y):
    tmpl = ScaledSquare(c, d)
    h = float(tmpl.value(np.array([u]), y))
    enc = relax_converter(tmpl)
    if abs(h) > 1e-9 * (1 + abs(y)):
        assert (cone_margin(enc, [u], y) >= 0) == (h <= 0)


# ---- relaxation -------------------------------------------------------------


def test_full_scale_eco_program_shape():
    p, _ = sc.eco_case(1)
    cp = build_relaxation(p)
    K = p.K
    assert cp.dims["q"] == [3] * (2 * K)
    lay = cp.layout
    assert cp.n == (K + 1) * p.n_x + K * (p.n_u + p.M + lay.n_s)
    n_fixed = cp.bound_rows["fixed"].size
    assert cp.n_eq == (K + 1) * p.n_x + K * p.J + n_fixed
    # machine converter is linear: one nonnegative row per step
    assert sum(b.kind == "lin" for row in cp.cones for b in row) == K


def test_cone_list_covers_every_converter_once(eco20):
    cp = build_relaxation(eco20)
    starts = [b.start for row in cp.cones for b in row]
    assert len(starts) == eco20.K * eco20.M == len(set(starts))
    assert max(b.start + b.size for row in cp.cones for b in row) == cp.n_ineq


def test_single_step_cvem_without_losses():
    # no machine offset: the engine can stay off and burns its idle term only
    coef = {"f": (1e-5, 2.5, 1000.0), "em": (2e-6, 1.1, 0.0), "s": (2e-6, 1.0, 0.0)}
    sol = solve(build_relaxation(cvem_small(v_p=[0.0], coef=coef)))
    assert sol.optimal
    assert sol.pobj == pytest.approx(1.0, abs=1e-7)  # kW


def test_single_step_cvem_machine_offset():
    # the machine idles at 0.2 kW, the engine covers it and the battery stays put
    p = cvem_small(v_p=[0.0])
    sol = solve(build_relaxation(p))
    a2, a1, a0 = 2e-3, 1.1, 0.2  # kW form of the machine map
    u_em = (-a1 + np.sqrt(a1**2 - 4 * a2 * a0)) / (2 * a2)
    u_f = -u_em
    expected = 1e-2 * u_f**2 + 2.5 * u_f + 1.0
    assert sol.pobj == pytest.approx(expected, rel=1e-7)


def test_failed_requirements_raise_without_force():
    p = eco_small(K=5, bounds=sc.EcoBounds(kin_input_min=0.0))
    with pytest.raises(RequirementUnmet) as exc:
        build_relaxation(p)
    assert exc.value.report.failed_names() == ["v_rank"]
    assert build_relaxation(p, force=True).n > 0


def assert_feasible(cp, z, tol=1e-9):
    assert np.abs(cp.A @ z - cp.b).max() <= tol
    slack = cp.h - cp.G @ z
    l = cp.dims["l"]
    assert slack[:l].min() >= -tol
    i = l
    for q in cp.dims["q"]:
        assert slack[i] - np.linalg.norm(slack[i + 1:i + q]) >= -tol
        i += q


@settings(max_examples=20)
@given(seed=st.integers(0, 2**16))
def test_original_feasible_points_are_relaxed_feasible(seed):
    p = sc.random_network(np.random.default_rng(seed), K=4)
    cp = build_relaxation(p, force=True)
    t = p.meta["trajectory"]
    x, u, y = (np.asarray(t[k]) for k in ("x", "u", "y"))
    s = p.v - x[:-1] @ p.E.T - u @ p.F.T - y @ p.G.T
    assert_feasible(cp, pack(cp, x, u, y, s))


# ---- regularization --------------------------------------------------------


def test_lethargy_regularization_weights(eco20):
    cp = build_relaxation(eco20)
    idx = output_indices(cp, ["leth"])
    reg = add_regularization(cp, idx, 0.01)
    np.testing.assert_allclose(reg.c - cp.c, np.where(np.isin(np.arange(cp.n), idx), 0.01, 0))
    assert reg.base_c is cp.base_c or np.array_equal(reg.base_c, cp.base_c)
    assert reg.A is cp.A and reg.G is cp.G


def test_zero_weight_is_identity(eco20):
    cp = build_relaxation(eco20)
    reg = add_regularization(cp, output_indices(cp, ["leth"]), 0.0)
    assert np.array_equal(reg.c, cp.c) and reg.regularization == {}


def test_regularizing_a_state_is_rejected(eco20):
    cp = build_relaxation(eco20)
    with pytest.raises(ValueError):
        add_regularization(cp, [int(cp.layout.ix(1, 0))], 0.01)


# ---- text dump --------------------------------------------------------------


def test_dump_round_trip(tmp_path, cvem10):
    cp = build_relaxation(cvem10)
    dump_program(cp, tmp_path / "cp.txt")
    back = load_program(tmp_path / "cp.txt")
    assert back.dims == cp.dims
    for name in ("c", "b", "h"):
        np.testing.assert_array_equal(getattr(back, name), getattr(cp, name))
    assert (back.A != cp.A).nnz == 0 and (back.G != cp.G).nnz == 0
    assert solve(back).pobj == pytest.approx(solve(cp).pobj, rel=1e-9)
