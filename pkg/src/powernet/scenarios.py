"""Scenario builders: eco-driving, series-hybrid energy management, routes.

The eco-driving network is built in scaled units so that all variables are
O(1)-O(100): kinetic energy in MJ, forces in kN, and the distance gain of the
kinetic-energy buffer in km. Velocities stay in m/s, lethargy in s/m and time
in s. With these units ``B_d`` is ``0.005`` for a 5 m sample distance.

The energy-management (CVEM) network uses kW for powers and kJ for energies.
Parameters are given in SI and converted by the builder.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ScenarioError
from .network import (
    CONSERVATIVE,
    DISSIPATIVE,
    Buffer,
    Converter,
    Hyperbolic,
    Linear,
    NetworkProblem,
    Node,
    PowerNetwork,
    Quadratic,
    ScaledSquare,
)

MJ = 1e6
KN = 1e3
KW = 1e3


# --------------------------------------------------------------------------
# vehicle and route
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class VehicleParams:
    """Longitudinal vehicle data (SI).

    ``c_g`` is the lumped drag constant of the distance-domain energy model
    ``dE/ds = F - m g (sin a + c_r cos a) - (c_g / m_e) E``; 5.093 kg/m with
    ``m_e = 13400`` kg and ``delta_s = 5`` m reproduces ``A_d = 0.9981``.
    """

    m: float = 13400.0
    m_e: float = 13400.0
    c_g: float = 5.093
    c_r: float = 0.007
    g: float = 9.81
    delta_s: float = 5.0

    def __post_init__(self):
        for name in ("m", "m_e", "g", "delta_s"):
            if not getattr(self, name) > 0:
                raise ScenarioError(f"{name} must be positive")
        if self.c_g < 0 or self.c_r < 0:
            raise ScenarioError("c_g and c_r must be non-negative")
        if self.m_e < self.m:
            raise ScenarioError("equivalent mass m_e must be at least m")


class Discretization(NamedTuple):
    A_d: float
    B_d: float
    limit: bool  # True when c_g = 0 and the drag-free limit was used


def discretize_longitudinal(p: VehicleParams) -> Discretization:
    """Exact zero-order-hold discretization of the kinetic-energy model over ``delta_s``.

    Returns ``A_d = exp(-c_g delta_s / m_e)`` and ``B_d = (m_e / c_g)(1 - A_d)``
    in metres; the drag-free limit ``(1, delta_s)`` is flagged.
    """
    if p.c_g == 0.0:
        return Discretization(1.0, p.delta_s, True)
    r = p.c_g * p.delta_s / p.m_e
    return Discretization(math.exp(-r), -(p.m_e / p.c_g) * math.expm1(-r), False)


@dataclass(frozen=True, eq=False)
class Route:
    """Road gradient sampled every ``delta_s`` metres."""

    length: float
    grade: np.ndarray  # rad, one sample per step
    delta_s: float = 5.0

    def __post_init__(self):
        grade = np.asarray(self.grade, dtype=float).ravel()
        n = math.ceil(round(self.length / self.delta_s, 9))
        if grade.size != n:
            raise ScenarioError(f"route needs {n} gradient samples, got {grade.size}")
        if np.any(np.abs(grade) >= math.pi / 2):
            raise ScenarioError("gradient must lie in (-pi/2, pi/2)")
        object.__setattr__(self, "grade", grade)

    @property
    def n_samples(self) -> int:
        return self.grade.size

    @property
    def s(self) -> np.ndarray:
        return np.arange(self.n_samples) * self.delta_s

    def altitude(self) -> np.ndarray:
        """Altitude at every sample point and the end point (n + 1 values)."""
        return np.concatenate([[0.0], np.cumsum(np.sin(self.grade) * self.delta_s)])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s_m", "grade_rad"])
            for s, a in zip(self.s, self.grade):
                w.writerow([repr(float(s)), repr(float(a))])

    @classmethod
    def from_csv(cls, path, delta_s: float | None = None) -> "Route":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"s_m", "grade_rad"} <= set(reader.fieldnames):
                raise ScenarioError("route CSV needs a header with columns s_m, grade_rad")
            rows = [(float(r["s_m"]), float(r["grade_rad"])) for r in reader]
        if len(rows) < 1:
            raise ScenarioError("route CSV is empty")
        s = np.array([r[0] for r in rows])
        if delta_s is None:
            if len(rows) < 2:
                raise ScenarioError("cannot infer delta_s from a single sample")
            delta_s = float(s[1] - s[0])
        if not np.allclose(np.diff(s), delta_s):
            raise ScenarioError("route CSV samples must be equidistant")
        return cls(length=len(rows) * delta_s, grade=[r[1] for r in rows], delta_s=delta_s)


def synth_route(length: float, hill: dict | None = None, delta_s: float = 5.0,
                descent: bool = True, ramp: float = 200.0) -> Route:
    """Synthetic gradient profile with one hill.

    ``hill = {"start": s0, "end": s1, "grade": g}`` climbs with slope ``g``
    (rise over run) between ``s0`` and ``s1``; with ``descent`` a mirrored
    downhill follows directly, so the route ends at its starting altitude.
    Grade changes are smoothed with raised-cosine ramps of width ``ramp``.
    """
    n = math.ceil(round(length / delta_s, 9))
    s = (np.arange(n) + 0.5) * delta_s  # midpoint of each step
    grade = np.zeros(n)
    if hill:
        start, end, g = float(hill["start"]), float(hill["end"]), float(hill["grade"])
        if not 0 <= start < end <= length:
            raise ScenarioError("hill needs 0 <= start < end <= length")
        if not -0.3 < g < 0.3:
            raise ScenarioError("hill grade must lie in (-0.3, 0.3)")
        width = end - start
        ramp = min(ramp, 0.5 * width)
        slope = np.arctan(g)
        grade += slope * _plateau(s, start, end, ramp)
        if descent:
            grade -= slope * _plateau(s, end, end + width, ramp)
    return Route(length=n * delta_s, grade=grade, delta_s=delta_s)


def _plateau(s, a, b, ramp):
    # 0 outside [a, b], 1 inside, raised-cosine ramps of width `ramp` centred on a and b;
    # antisymmetric about each edge, so the integral equals b - a exactly
    def step(t):
        if ramp <= 0:
            return (t >= 0).astype(float)
        r = np.clip((t + 0.5 * ramp) / ramp, 0.0, 1.0)
        return 0.5 - 0.5 * np.cos(np.pi * r)

    return step(s - a) - step(s - b)


# --------------------------------------------------------------------------
# eco-driving
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EcoBounds:
    """Operating limits for the eco-driving network (SI)."""

    v_min: float = 5.0  # m/s, kinetic-energy state
    v_max: float = 25.0
    v_input_min: float = 0.5  # m/s, velocity inputs of the two converters
    v_input_max: float = 40.0
    force_max: float = 30e3  # N, electric machine
    force_regen: float = 20e3  # N, largest regenerative force
    force_brake: float = 60e3  # N, most negative net force
    v_final_min: float | None = None
    kin_input_min: float | None = None  # lower bound of the kinetic converter's input only

    def __post_init__(self):
        if not 0 < self.v_input_min <= self.v_min < self.v_max:
            raise ScenarioError("need 0 < v_input_min <= v_min < v_max")
        if self.kin_input_min is not None and not 0 <= self.kin_input_min <= self.v_min:
            raise ScenarioError("need 0 <= kin_input_min <= v_min")
        if self.v_input_max < self.v_max:
            raise ScenarioError("v_input_max must be at least v_max")


def build_eco_driving(p: VehicleParams, r: Route, T_max: float, v_init: float = 15.0,
                      bounds: EcoBounds | None = None) -> NetworkProblem:
    """Eco-driving over a route: minimise propulsion work under a trip-time limit.

    Subsystems: kinetic-energy buffer (input: net force), time buffer (input:
    lethargy), electric machine (linear converter, cost), kinetic-energy
    converter ``y = 0.5 m_e u^2`` and lethargy converter ``y u = 1``. Nodes:
    brake (dissipative), kinetic, velocity and lethargy (conservative).
    """
    if not T_max > 0:
        raise ScenarioError("T_max must be positive")
    if abs(r.delta_s - p.delta_s) > 1e-9:
        raise ScenarioError("route and vehicle use different sample distances")
    bounds = bounds or EcoBounds()
    if not bounds.v_min <= v_init <= bounds.v_max:
        raise ScenarioError("initial velocity outside [v_min, v_max]")
    K = r.n_samples
    if T_max < K * p.delta_s / bounds.v_max - 1e-9:
        raise ScenarioError("T_max is shorter than the route at maximum speed")
    disc = discretize_longitudinal(p)
    B_km = disc.B_d / 1e3
    resist = p.m * p.g * (np.sin(r.grade) + p.c_r * np.cos(r.grade))  # N
    f_kin = -B_km * resist / KN  # MJ
    c_kin = 0.5 * p.m_e / MJ

    def energy(v):
        return c_kin * v * v

    net = PowerNetwork()
    xK_lo = None if bounds.v_final_min is None else [energy(bounds.v_final_min)]
    kin = net.add_buffer(Buffer(
        A=[[disc.A_d]], B=[[B_km]], f=f_kin[:, None], x_init=[energy(v_init)],
        x_lo=[energy(bounds.v_min)], x_hi=[energy(bounds.v_max)],
        u_lo=[-bounds.force_brake / KN], u_hi=[bounds.force_max / KN], xK_lo=xK_lo,
        name="kin",
    ))
    tim = net.add_buffer(Buffer(
        A=[[1.0]], B=[[p.delta_s]], x_init=[0.0], x_lo=[0.0], x_hi=[T_max],
        u_lo=[0.0], u_hi=[1.0 / bounds.v_input_min], name="time",
    ))
    em = net.add_converter(Converter(
        Linear(a=[1.0]), u_lo=[-bounds.force_regen / KN], u_hi=[bounds.force_max / KN],
        cost_b=1.0, name="em",
    ))
    vel = net.add_converter(Converter(
        ScaledSquare(c=c_kin), u_hi=[bounds.v_input_max], name="v",
        u_lo=[bounds.v_input_min if bounds.kin_input_min is None else bounds.kin_input_min],
    ))
    leth = net.add_converter(Converter(
        Hyperbolic(eps=0.0), u_lo=[bounds.v_input_min], u_hi=[bounds.v_input_max], name="leth",
    ))
    net.add_node(Node(f={net.buffer_input(kin): 1.0, net.converter_input(em): -1.0},
                      kind=DISSIPATIVE, name="brake"))
    net.add_node(Node(e={net.state(kin): -1.0}, g={net.output(vel): 1.0}, name="kinetic"))
    net.add_node(Node(f={net.converter_input(vel): -1.0, net.converter_input(leth): 1.0},
                      name="velocity"))
    net.add_node(Node(f={net.buffer_input(tim): -1.0}, g={net.output(leth): 1.0}, name="lethargy"))
    meta = {
        "scenario": "eco_driving",
        "vehicle": asdict(p),
        "grade": r.grade.tolist(),
        "T_max": float(T_max),
        "v_init": float(v_init),
        "bounds": asdict(bounds),
        "units": {"energy": "MJ", "force": "kN", "velocity": "m/s",
                  "lethargy": "s/m", "time": "s", "kin_gain": "km"},
        "A_d": disc.A_d,
        "B_d_m": disc.B_d,
    }
    return net.assemble(K, meta=meta)


def eco_case(case: int, K: int = 2500, hill_grade: float = 0.03, sigma: float = 0.01):
    """The three study cases on the synthetic 12.5 km route.

    Returns ``(problem, regularize)`` where ``regularize`` maps converter names to
    the regularization weight (empty unless case 3).
    """
    if case not in (1, 2, 3):
        raise ScenarioError("case must be 1, 2 or 3")
    p = VehicleParams()
    route = synth_route(K * p.delta_s, hill={"start": 2000.0, "end": 3000.0, "grade": hill_grade},
                        delta_s=p.delta_s)
    T_max = 700.0 if case == 1 else 1e5
    prob = build_eco_driving(p, route, T_max=T_max)
    return prob, ({"leth": sigma} if case == 3 else {})


# --------------------------------------------------------------------------
# series-hybrid energy management
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CvemParams:
    """Series-hybrid energy management data (SI: W, J, s).

    ``coef[m] = (a2, a1, a0)`` maps converter input power ``u`` to the power
    ``y = a2 u^2 + a1 u + a0`` it draws: fuel power for the engine ``f``,
    electrical power for the machine ``em`` and terminal power for the
    battery ``s`` (whose input is the chemical charging power).
    """

    v_p: np.ndarray  # W, drive-train demand per step
    delta_T: float = 1.0
    coef: dict = field(default_factory=lambda: {
        "f": (1.0e-5, 2.5, 1000.0),
        "em": (2.0e-6, 1.1, 200.0),
        "s": (2.0e-6, 1.0, 0.0),
    })
    x_init: float = 4.0e6  # J
    x_lo: float = 1.0e6
    x_hi: float = 7.0e6
    xK_lo: float | None = None  # defaults to x_init (charge sustaining)
    p_f_max: float = 80e3
    p_em_min: float = -30e3
    p_em_max: float = 60e3
    p_s_max: float = 60e3  # |chemical power|
    allow_braking: bool = True

    def __post_init__(self):
        v_p = np.atleast_1d(np.asarray(self.v_p, dtype=float))
        object.__setattr__(self, "v_p", v_p)
        for m in ("f", "em", "s"):
            if m not in self.coef or len(self.coef[m]) != 3:
                raise ScenarioError(f"coefficients for converter {m!r} missing")
            if self.coef[m][0] < 0:
                raise ScenarioError(f"a2 of converter {m!r} is negative; no convex relaxation")
        if not self.delta_T > 0:
            raise ScenarioError("delta_T must be positive")
        if not self.x_lo <= self.x_init <= self.x_hi:
            raise ScenarioError("x_init outside battery bounds")

    @property
    def K(self) -> int:
        return self.v_p.size


def _scaled_coef(coef):
    # y[kW] = a2 (1e3 u[kW])^2 / 1e3 + a1 u[kW] + a0 / 1e3
    a2, a1, a0 = coef
    return a2 * KW, a1, a0 / KW


def build_cvem(c: CvemParams) -> NetworkProblem:
    """Series-hybrid network: engine, machine and battery feeding a drive node.

    Nodes: electrical bus ``y_s + y_em = 0`` (conservative) and drive
    ``-u_f - u_em + s = -v_p`` (dissipative brake). Battery energy
    ``x_{k+1} = x_k + delta_T u_s``; cost is the fuel power ``sum y_f``.
    """
    net = PowerNetwork()
    xK = c.x_init if c.xK_lo is None else c.xK_lo
    bat = net.add_buffer(Buffer(
        A=[[1.0]], B=[[c.delta_T]], x_init=[c.x_init / KW], x_lo=[c.x_lo / KW],
        x_hi=[c.x_hi / KW], u_lo=[-c.p_s_max / KW], u_hi=[c.p_s_max / KW],
        xK_lo=[xK / KW], name="battery",
    ))
    s = net.add_converter(Converter(Quadratic.from_poly(*_scaled_coef(c.coef["s"])),
                                    buffer=bat, name="s"))
    f = net.add_converter(Converter(Quadratic.from_poly(*_scaled_coef(c.coef["f"])),
                                    u_lo=[0.0], u_hi=[c.p_f_max / KW], cost_b=1.0, name="f"))
    em = net.add_converter(Converter(Quadratic.from_poly(*_scaled_coef(c.coef["em"])),
                                     u_lo=[c.p_em_min / KW], u_hi=[c.p_em_max / KW], name="em"))
    net.add_node(Node(g={net.output(s): 1.0, net.output(em): 1.0}, name="bus"))
    net.add_node(Node(f={net.converter_input(f): -1.0, net.converter_input(em): -1.0},
                      kind=DISSIPATIVE if c.allow_braking else CONSERVATIVE,
                      load=-c.v_p / KW, name="drive"))
    meta = {
        "scenario": "cvem",
        "params": {
            "v_p": c.v_p.tolist(), "delta_T": c.delta_T,
            "coef": {k: list(v) for k, v in c.coef.items()},
            "x_init": c.x_init, "x_lo": c.x_lo, "x_hi": c.x_hi, "xK_lo": xK,
            "p_f_max": c.p_f_max, "p_em_min": c.p_em_min, "p_em_max": c.p_em_max,
            "p_s_max": c.p_s_max, "allow_braking": c.allow_braking,
        },
        "units": {"power": "kW", "energy": "kJ"},
    }
    return net.assemble(c.K, meta=meta)


# --------------------------------------------------------------------------
# random networks
# --------------------------------------------------------------------------


def random_network(rng: np.random.Generator, K: int = 4, n_buffers: int = 2,
                   n_converters: int = 3, n_nodes: int = 2,
                   dissipative_fraction: float = 0.5) -> NetworkProblem:
    """Random feasible network that meets the structural requirements.

    Every converter owns one input; each node couples converter outputs with
    inputs of *other* subsystems and buffer states, with non-negative output
    weights. Loads and disturbances are generated from a random trajectory on
    the converter manifolds, so the problem is feasible by construction.
    """
    net = PowerNetwork()
    bufs = []
    for i in range(n_buffers):
        bufs.append(net.add_buffer(Buffer(
            A=[[rng.uniform(0.6, 1.0)]], B=[[rng.uniform(0.2, 1.0)]], x_init=[0.0],
            x_lo=[-5.0], x_hi=[5.0], u_lo=[-2.0], u_hi=[2.0],
            cost_a=[rng.uniform(-0.5, 0.5)], name=f"buf{i}",
        )))
    convs = []
    for m in range(n_converters):
        kind = rng.integers(4)
        if kind == 0:
            tmpl, lo, hi = ScaledSquare(c=rng.uniform(0.2, 2.0), d=rng.uniform(-1, 1)), 0.3, 2.0
        elif kind == 1:
            tmpl, lo, hi = Hyperbolic(eps=rng.uniform(0.0, 0.5)), 0.3, 3.0
        elif kind == 2:
            tmpl = Quadratic.from_poly(rng.uniform(0.05, 1.0), rng.uniform(0.5, 1.5), rng.uniform(0, 0.5))
            lo, hi = -1.0, 2.0
        else:
            tmpl, lo, hi = Linear(a=[rng.uniform(0.5, 2.0)], beta=rng.uniform(-0.5, 0.5)), -2.0, 2.0
        convs.append(net.add_converter(Converter(
            tmpl, u_lo=[lo], u_hi=[hi], cost_a=[rng.uniform(-0.2, 0.2)],
            cost_b=rng.uniform(0.0, 1.0), name=f"conv{m}",
        )))

    conv_inputs = [net.converter_input(c) for c in convs]
    buf_inputs = [net.buffer_input(b) for b in bufs]
    n_nodes = min(n_nodes, len(conv_inputs) + len(buf_inputs))
    # each node gets a distinct "pivot" input so F stays full row rank
    pivots = list(rng.permutation(buf_inputs + conv_inputs)[:n_nodes])
    node_specs = []
    for j in range(n_nodes):
        g = {}
        f = {int(pivots[j]): float(rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.5))}
        for m in rng.permutation(len(convs))[: rng.integers(0, 3)]:
            if conv_inputs[m] in f:
                continue
            g[net.output(convs[m])] = float(rng.uniform(0.2, 1.0))
        e = {}
        if rng.random() < 0.5:
            e[net.state(bufs[rng.integers(len(bufs))])] = float(rng.uniform(-1, 1))
        kind = DISSIPATIVE if rng.random() < dissipative_fraction else CONSERVATIVE
        node_specs.append((e, f, g, kind))

    # feasible trajectory
    n_x, n_u = net.n_x, net.n_u
    A = np.zeros((n_x, n_x))
    B = np.zeros((n_x, n_u))
    for b in bufs:
        A[net.state(b), net.state(b)] = net.buffers[b].A[0, 0]
        B[net.state(b), net.buffer_input(b)] = net.buffers[b].B[0, 0]
    u = np.zeros((K, n_u))
    for b in bufs:
        u[:, net.buffer_input(b)] = rng.uniform(-1.0, 1.0, K)
    for c in convs:
        conv = net.converters[c]
        lo, hi = conv.u_lo[0], conv.u_hi[0]
        u[:, net.converter_input(c)] = rng.uniform(lo + 0.1 * (hi - lo), hi - 0.1 * (hi - lo), K)
    x = np.zeros((K + 1, n_x))
    f_dist = rng.uniform(-0.3, 0.3, (K, n_x))
    for k in range(K):
        # clipping keeps the trajectory strictly inside the state box
        x[k + 1] = np.clip(A @ x[k] + B @ u[k] + f_dist[k], -4.0, 4.0)
        f_dist[k] = x[k + 1] - A @ x[k] - B @ u[k]
    for b in bufs:
        net.buffers[b].f = f_dist[:, net.state(b)][:, None].copy()
    y = np.zeros((K, len(convs)))
    for i, c in enumerate(convs):
        y[:, i] = net.converters[c].template.output(u[:, [net.converter_input(c)]])
    for e, f, g, kind in node_specs:
        row_e = np.zeros(n_x)
        row_f = np.zeros(n_u)
        row_g = np.zeros(len(convs))
        for k_, val in e.items():
            row_e[k_] = val
        for k_, val in f.items():
            row_f[k_] = val
        for k_, val in g.items():
            row_g[k_] = val
        slack = rng.uniform(0.0, 0.5, K) if kind == DISSIPATIVE else np.zeros(K)
        load = x[:K] @ row_e + u @ row_f + y @ row_g + slack
        net.add_node(Node(e=e, f=f, g=g, kind=kind, load=load))
    traj = {"x": x.tolist(), "u": u.tolist(), "y": y.tolist()}
    return net.assemble(K, meta={"scenario": "random", "trajectory": traj})


# --------------------------------------------------------------------------
# toy networks
# --------------------------------------------------------------------------


def toy_two_branch() -> NetworkProblem:
    """Two converters feeding dissipative nodes; only the first output is priced.

    ``y1 = 0.5 u1^2`` (cost 1, ``u1`` in [1, 2]) and ``y2 = 0.25 u2^2`` (cost 0,
    ``u2`` in [0.5, 1.5]) with ``u1 + u2 >= 3`` and ``y1 + y2 <= 10``. The
    unique optimum is ``u1 = u2 = 1.5``, ``y1 = 1.125``, ``y2 = 0.5625`` with
    cost 1.125; the relaxation leaves ``y2`` free above its model value.
    """
    net = PowerNetwork()
    c1 = net.add_converter(Converter(ScaledSquare(0.5), u_lo=[1.0], u_hi=[2.0], cost_b=1.0,
                                     name="branch1"))
    c2 = net.add_converter(Converter(ScaledSquare(0.25), u_lo=[0.5], u_hi=[1.5], cost_b=0.0,
                                     name="branch2"))
    net.add_node(Node(f={net.converter_input(c1): -1.0, net.converter_input(c2): -1.0},
                      kind=DISSIPATIVE, load=-3.0, name="supply"))
    net.add_node(Node(g={net.output(c1): 1.0, net.output(c2): 1.0}, kind=DISSIPATIVE,
                      load=10.0, name="cap"))
    return net.assemble(1, meta={"scenario": "toy_two_branch"})


def toy_conservative_slack() -> NetworkProblem:
    """A converter whose output is pinned by a storage state through a conservative node.

    ``y = u^2`` with ``u`` in [0, 1] must equal the state ``x = 4`` of a
    constant buffer. The relaxation ``y >= u^2`` is feasible, the original
    equality is not, and no dissipative node can take the surplus.
    """
    net = PowerNetwork()
    b = net.add_buffer(Buffer(A=[[1.0]], B=[[1.0]], x_init=[4.0], x_lo=[0.0], x_hi=[10.0],
                              u_lo=[0.0], u_hi=[0.0], name="store"))
    c = net.add_converter(Converter(ScaledSquare(1.0), u_lo=[0.0], u_hi=[1.0], cost_a=[-1.0],
                                    name="conv"))
    net.add_node(Node(e={net.state(b): -1.0}, g={net.output(c): 1.0}, name="pin"))
    return net.assemble(1, meta={"scenario": "toy_conservative_slack"})


def load_vehicle(d: dict) -> VehicleParams:
    return VehicleParams(**{k: float(v) for k, v in d.items() if k != "units"})
