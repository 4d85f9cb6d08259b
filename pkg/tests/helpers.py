"""Small scenario instances shared by the tests."""
import numpy as np

from powernet import scenarios as sc
from powernet.network import Hyperbolic, Linear, Quadratic, ScaledSquare

CVEM_CYCLE = np.array([5, 20, 35, 10, 0, 25, 40, 15, 8, 30]) * 1e3


def eco_small(K=20, T_max=9.0, bounds=None, hill=None):
    """Short eco-driving instance on a 5 m grid (flat unless ``hill`` is given)."""
    veh = sc.VehicleParams()
    route = sc.synth_route(K * veh.delta_s, hill=hill, delta_s=veh.delta_s)
    return sc.build_eco_driving(veh, route, T_max=T_max, bounds=bounds)


def cvem_small(v_p=CVEM_CYCLE, **kw):
    return sc.build_cvem(sc.CvemParams(v_p=np.asarray(v_p, float), **kw))


# converter templates with the sampling box used for boundary tests
TEMPLATES = {
    "scaled_square": (ScaledSquare(0.7, 0.3), (-3.0, 3.0)),
    "hyperbolic": (Hyperbolic(0.2), (0.05, 5.0)),
    "polynomial": (Quadratic.from_poly(0.1, 1.1, 0.2), (-3.0, 3.0)),
    "bivariate": (Quadratic(np.array([[2.0, 0.5, 0], [0.5, 1.0, 0], [0, 0, 0]]),
                            [0.3, -0.2, -1.5], 0.4), (-3.0, 3.0)),
    "linear": (Linear([1.5, -0.5], 0.1), (-3.0, 3.0)),
}


def cone_margin(enc, z, y):
    """``s_0 - ||s_1:||`` of an encoded converter (or the single linear slack)."""
    s = enc.slack(z, y)
    return s[0] if enc.kind == "lin" else s[0] - np.linalg.norm(s[1:])


def boundary_coincidence(template, rng, n=10_000, box=(-3.0, 3.0)):
    """Sample ``n`` points on and off the converter manifold of ``template``.

    Returns ``(boundary_err, sign_mismatches)``: the largest scaled cone
    margin at points with ``h = 0``, and the number of off-manifold points
    where cone membership and ``h <= 0`` disagree.
    """
    from powernet.transcription import relax_converter

    enc = relax_converter(template)
    n_in = getattr(template, "n_inputs", 1)
    lo, hi = box
    err, bad = 0.0, 0
    for _ in range(n):
        z = rng.uniform(lo, hi, n_in)
        y_star = float(template.output(z))
        scale = 1.0 + abs(y_star) + np.abs(z).max()
        err = max(err, abs(cone_margin(enc, z, y_star)) / scale)
        y = y_star + rng.choice([-1.0, 1.0]) * 10.0 ** rng.uniform(-6, 1)
        h = float(template.value(z, y))
        inside = cone_margin(enc, z, y) >= 0
        if inside != (h <= 0):
            bad += 1
    return err, bad


def pack(cp, x, u, y, s):
    """Stack trajectories into the decision vector of ``cp``."""
    lay = cp.layout
    z = np.zeros(cp.n)
    z[lay.x0:lay.u0] = np.ravel(x)
    z[lay.u0:lay.y0] = np.ravel(u)
    z[lay.y0:lay.s0] = np.ravel(y)
    z[lay.s0:] = np.ravel(np.asarray(s)[:, lay.diss])
    return z


REFERENCE_BACKENDS = ("clarabel", "cvxopt", "scs")


def reference_solve(cp):
    """First external backend that reports an optimum, or the last attempt."""
    from powernet.solver import solve

    for name in REFERENCE_BACKENDS:
        ref = solve(cp, backend=name)
        if ref.optimal:
            break
    return ref
