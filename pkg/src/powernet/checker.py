"""Structural requirements of a network and the constraint qualification they imply.

Five requirements make the relaxed converter inequalities exact:

i.   every converter's relaxed set ``{h <= 0}`` is convex,
ii.  every converter is strictly decreasing in its output (``dh/dy < 0``),
iii. output cost weights and node output weights are non-negative,
iv.  no node couples a converter's output with that converter's own state/input,
v.   ``F + G dy/du`` has full row rank at every feasible point.

Symbolic certificates are issued where a template allows it; otherwise the
box is sampled (Halton points plus corners) and the result is labelled
``sampled-pass`` so the gap to a proof stays visible.
"""
from __future__ import annotations

import itertools
import json
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.stats import qmc

from .errors import SingularOutputDerivative
from .network import Converter, Hyperbolic, Linear, NetworkProblem, Quadratic, ScaledSquare

CERTIFIED = "certified"
SAMPLED = "sampled-pass"
FAIL = "fail"

RANK_TOL = 1e-8
EIG_TOL = 1e-10


@dataclass(frozen=True)
class Status:
    state: str
    n_points: int = 0
    witness: dict | None = None
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.state != FAIL

    def to_dict(self) -> dict:
        d = {"state": self.state}
        if self.state == SAMPLED:
            d["n_points"] = self.n_points
        if self.witness is not None:
            d["witness"] = _jsonable(self.witness)
        if self.detail:
            d["detail"] = self.detail
        return d


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def _combine(statuses, names=None):
    """Merge per-item statuses: first failure wins, else sampled if any sampled."""
    names = names or [None] * len(statuses)
    for name, st in zip(names, statuses):
        if st.state == FAIL:
            w = dict(st.witness or {})
            if name is not None:
                w.setdefault("converter", name)
            return Status(FAIL, st.n_points, w, st.detail)
    sampled = [st for st in statuses if st.state == SAMPLED]
    if sampled:
        return Status(SAMPLED, sum(st.n_points for st in sampled))
    return Status(CERTIFIED)


@dataclass
class RequirementReport:
    """Outcome of the requirement checks for one problem."""

    statuses: dict = field(default_factory=dict)
    rank_margin: float = np.inf  # smallest J-th singular value seen
    rank_margin_rel: float = np.inf  # same, relative to the largest singular value
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(st.passed for st in self.statuses.values())

    def failed_names(self) -> list:
        return [k for k, st in self.statuses.items() if not st.passed]

    def __getitem__(self, key) -> Status:
        return self.statuses[key]

    def merge(self, other: "RequirementReport") -> "RequirementReport":
        out = RequirementReport(dict(self.statuses), min(self.rank_margin, other.rank_margin),
                                min(self.rank_margin_rel, other.rank_margin_rel),
                                self.notes + other.notes)
        out.statuses.update(other.statuses)
        return out

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "requirements": {k: st.to_dict() for k, st in self.statuses.items()},
            "rank_margin": None if not np.isfinite(self.rank_margin) else float(self.rank_margin),
            "rank_margin_rel": None if not np.isfinite(self.rank_margin_rel)
            else float(self.rank_margin_rel),
            "notes": list(self.notes),
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, **kw)

    def summary(self) -> str:
        lines = []
        for k, st in self.statuses.items():
            extra = f" ({st.n_points} points)" if st.state == SAMPLED else ""
            if st.state == FAIL:
                extra = f" witness={_jsonable(st.witness)}"
            lines.append(f"{k:<22s} {st.state}{extra}")
        if np.isfinite(self.rank_margin):
            lines.append(f"{'rank margin':<22s} {self.rank_margin:.3e} "
                         f"(relative {self.rank_margin_rel:.3e})")
        return "\n".join(lines)


# --------------------------------------------------------------------------
# sampling helpers
# --------------------------------------------------------------------------


def box_points(lo, hi, n=512, corners=True):
    """Deterministic Halton points in ``[lo, hi]`` plus every corner up to dimension 10."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    d = lo.size
    if d == 0:
        return np.zeros((1, 0))
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("sampling needs a bounded box; pass clip= to override")
    pts = qmc.Halton(d, scramble=False).random(n) if n else np.zeros((0, d))
    pts = lo + pts * (hi - lo)
    if corners and d <= 10:
        cs = np.array(list(itertools.product([0.0, 1.0], repeat=d)))
        pts = np.vstack([lo + cs * (hi - lo), pts])
    return pts


def _clip_box(lo, hi, clip):
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    if clip is not None:
        lo = np.where(np.isfinite(lo), lo, -clip)
        hi = np.where(np.isfinite(hi), hi, clip)
    return lo, hi


def converter_box(conv, lo=None, hi=None):
    """Argument box of a builder :class:`Converter` that owns its inputs."""
    if lo is None and isinstance(conv, Converter) and conv.buffer is None:
        return np.asarray(conv.u_lo, dtype=float), np.asarray(conv.u_hi, dtype=float)
    if lo is None:
        n = conv.template.n_inputs
        return np.full(n, -np.inf), np.full(n, np.inf)
    return np.atleast_1d(np.asarray(lo, dtype=float)), np.atleast_1d(np.asarray(hi, dtype=float))


def problem_arg_box(p: NetworkProblem, m: int):
    """Union over steps of the argument box of converter ``m``."""
    conv = p.converters[m]
    lo, hi = [], []
    for kind, i in zip(conv.arg_kind, conv.arg_idx):
        if kind == "x":
            lo.append(p.x_lo[:-1, i].min())
            hi.append(p.x_hi[:-1, i].max())
        else:
            lo.append(p.u_lo[:, i].min())
            hi.append(p.u_hi[:, i].max())
    return np.array(lo), np.array(hi)


# --------------------------------------------------------------------------
# per-converter checks
# --------------------------------------------------------------------------


def _template(conv):
    return getattr(conv, "template", conv)


def _box_center(lo, hi):
    lo_f = np.where(np.isfinite(lo), lo, np.where(np.isfinite(hi), hi - 1.0, 0.0))
    hi_f = np.where(np.isfinite(hi), hi, lo_f + 2.0)
    return 0.5 * (lo_f + hi_f), lo_f, hi_f


def _midpoint_witness(tmpl, lo, hi, direction):
    """Two points on ``h = 0`` whose midpoint leaves the relaxed set."""
    c, lo_f, hi_f = _box_center(lo, hi)
    d = np.asarray(direction, dtype=float)
    # largest step keeping both ends inside the box
    with np.errstate(divide="ignore"):
        lim = np.where(d != 0, np.minimum((hi_f - c) / np.abs(d), (c - lo_f) / np.abs(d)), np.inf)
    t = float(np.min(lim))
    if not np.isfinite(t) or t <= 0:
        t = 1.0
    zp, zm = c + t * d, c - t * d
    yp, ym = float(tmpl.output(zp)), float(tmpl.output(zm))
    y_mid = 0.5 * (yp + ym)
    return {"z": c, "y": y_mid, "h": float(tmpl.value(c, y_mid)), "ends": [zp, zm]}


def check_convexity(conv, lo=None, hi=None) -> Status:
    """Requirement i: the relaxed set ``{h <= 0}`` over the argument box is convex."""
    tmpl = _template(conv)
    lo, hi = converter_box(conv, lo, hi)
    if isinstance(tmpl, Linear):
        return Status(CERTIFIED)
    if isinstance(tmpl, ScaledSquare):
        if tmpl.c >= -EIG_TOL:
            return Status(CERTIFIED)
        return Status(FAIL, witness=_midpoint_witness(tmpl, lo, hi, [1.0]),
                      detail="negative curvature")
    if isinstance(tmpl, Hyperbolic):
        # one branch of y (u + eps) >= 1 is convex; a box straddling -eps mixes both
        if lo[0] + tmpl.eps > 0 or hi[0] + tmpl.eps < 0:
            return Status(CERTIFIED)
        return Status(FAIL, witness={"z": [-tmpl.eps]}, detail="box straddles u = -eps")
    if isinstance(tmpl, Quadratic):
        n = tmpl.n_inputs
        if not tmpl.output_is_linear:
            c, _, _ = _box_center(lo, hi)
            return Status(FAIL, witness={"z": c}, detail="output enters the quadratic form")
        if n == 0:
            return Status(CERTIFIED)
        w, V = np.linalg.eigh(tmpl.Q[:n, :n])
        if w[0] >= -EIG_TOL * max(1.0, np.abs(w).max()):
            return Status(CERTIFIED)
        if tmpl.a[-1] == 0.0:
            c, _, _ = _box_center(lo, hi)
            return Status(FAIL, witness={"z": c}, detail="indefinite form and dh/dy = 0")
        return Status(FAIL, witness=_midpoint_witness(tmpl, lo, hi, V[:, 0]),
                      detail=f"min eigenvalue {w[0]:.3g}")
    raise TypeError(f"unknown template {type(tmpl).__name__}")


def check_monotonic_output(conv, lo=None, hi=None, n: int = 1000) -> Status:
    """Requirement ii: ``dh/dy < 0`` on the argument box (on the converter manifold)."""
    tmpl = _template(conv)
    lo, hi = converter_box(conv, lo, hi)
    if isinstance(tmpl, (Linear, ScaledSquare)):
        return Status(CERTIFIED, detail="dh/dy = -1")
    if isinstance(tmpl, Hyperbolic):
        e = tmpl.eps
        if lo[0] + e > 0:
            return Status(CERTIFIED, detail="dh/dy = -(u + eps) < 0")
        u_w = -e if hi[0] + e >= 0 else float(lo[0])
        return Status(FAIL, witness={"z": [u_w], "dh_dy": -(u_w + e)},
                      detail="u + eps must stay positive")
    if isinstance(tmpl, Quadratic):
        if tmpl.output_is_linear:
            ay = float(tmpl.a[-1])
            if ay < 0:
                return Status(CERTIFIED, detail=f"dh/dy = {ay:g}")
            c, _, _ = _box_center(lo, hi)
            return Status(FAIL, witness={"z": c, "dh_dy": ay})
        # y enters quadratically: sample the manifold h = 0
        blo, bhi = _clip_box(lo, hi, 1e3)
        pts = box_points(blo, bhi, n, corners=False)
        n_in = tmpl.n_inputs
        qyy = tmpl.Q[-1, -1]
        tested = 0
        for z in pts:
            qzy = float(tmpl.Q[-1, :n_in] @ z)
            ay = float(tmpl.a[-1])
            const = float(0.5 * z @ tmpl.Q[:n_in, :n_in] @ z + tmpl.a[:n_in] @ z + tmpl.beta)
            roots = np.roots([0.5 * qyy, qzy + ay, const]) if qyy else np.array([-const / (qzy + ay)])
            for y in np.real(roots[np.abs(np.imag(roots)) < 1e-12]):
                tested += 1
                _, gy = tmpl.grad(z, y)
                if float(gy) >= 0:
                    return Status(FAIL, witness={"z": z, "y": float(y), "dh_dy": float(gy)})
        return Status(SAMPLED, n_points=tested)
    raise TypeError(f"unknown template {type(tmpl).__name__}")


# --------------------------------------------------------------------------
# network checks
# --------------------------------------------------------------------------


def check_network_structure(p: NetworkProblem) -> dict:
    """Requirements iii (signs of b and G) and iv (no self-loops)."""
    out = {}
    bad_b = np.flatnonzero(p.b < 0)
    bad_g = np.argwhere(p.G < 0)
    if bad_b.size:
        m = int(bad_b[0])
        out["iii_positivity"] = Status(FAIL, witness={"converter": p.converters[m].name,
                                                     "b": float(p.b[m])})
    elif bad_g.size:
        j, m = (int(v) for v in bad_g[0])
        out["iii_positivity"] = Status(FAIL, witness={"node": p.node_names[j],
                                                     "converter": p.converters[m].name,
                                                     "G": float(p.G[j, m])})
    else:
        out["iii_positivity"] = Status(CERTIFIED)
    loop = None
    for j, m in np.argwhere(p.G != 0):
        conv = p.converters[m]
        if np.any(p.E[j, conv.own_x] != 0) or np.any(p.F[j, conv.own_u] != 0):
            loop = {"node": p.node_names[j], "converter": conv.name}
            break
    out["iv_no_self_loop"] = Status(CERTIFIED) if loop is None else Status(FAIL, witness=loop)
    return out


def rank_margin(F, G, dydu, rank_tol: float = RANK_TOL):
    """Numerical rank and singular values of ``F + G dy/du``.

    ``dydu`` is either a full ``(M, n_u)`` sensitivity matrix or the vector of
    the diagonal when every converter reads exactly the input of its column.

    Returns ``(rank, sigma_J, sigma_1)``.
    """
    F = np.atleast_2d(np.asarray(F, dtype=float))
    G = np.atleast_2d(np.asarray(G, dtype=float))
    D = np.asarray(dydu, dtype=float)
    if D.ndim == 1:
        D = np.diag(D)
    Mx = F + G @ D
    sv = np.linalg.svd(Mx, compute_uv=False)
    J = Mx.shape[0]
    s1 = float(sv[0]) if sv.size else 0.0
    rank = int(np.sum(sv > rank_tol * s1)) if s1 > 0 else 0
    sJ = float(sv[J - 1]) if sv.size >= J else 0.0
    return rank, sJ, s1


def _arg_vars(p):
    xs = sorted({int(i) for c in p.converters for i in c.x_idx})
    us = sorted({int(i) for c in p.converters for i in c.u_idx})
    return xs, us


def _sensitivities(p, X, U):
    """Batched ``dy/du`` (P, M, n_u) and ``dy/dx`` (P, M, n_x) on the converter manifold."""
    P = X.shape[0]
    dydu = np.zeros((P, p.M, p.n_u))
    dydx = np.zeros((P, p.M, p.n_x))
    Y = np.zeros((P, p.M))
    for m, conv in enumerate(p.converters):
        z = conv.args(X, U)
        y = conv.template.output(z)
        gz, gy = conv.template.grad(z, y)
        gy = np.broadcast_to(np.asarray(gy, dtype=float), (P,))
        if np.any(gy == 0):
            k = int(np.flatnonzero(gy == 0)[0])
            raise SingularOutputDerivative(
                f"dh/dy = 0 for converter {conv.name!r} at arguments {z[k].tolist()}")
        gz = np.asarray(gz, dtype=float).reshape(P, -1)
        for j, (kind, idx) in enumerate(zip(conv.arg_kind, conv.arg_idx)):
            tgt = dydx if kind == "x" else dydu
            tgt[:, m, idx] += -gz[:, j] / gy
        Y[:, m] = y
    return dydu, dydx, Y


def _constant_sensitivity(p) -> bool:
    for c in p.converters:
        t = c.template
        if isinstance(t, Linear):
            continue
        if isinstance(t, Quadratic) and not np.any(t.Q) and t.output_is_linear:
            continue
        return False
    return True


def check_rank(p: NetworkProblem, sampling: str = "halton", n: int = 512,
               rank_tol: float = RANK_TOL, clip: float | None = None,
               seed: int | None = None) -> RequirementReport:
    """Requirement v: ``F + G dy/du`` keeps full row rank ``J`` on the feasible boxes.

    Points are drawn in each distinct per-step box of the converter arguments
    (states and inputs); outputs follow from the converter equalities.
    ``sampling`` is ``"halton"``/``"grid"`` (deterministic, plus corners) or
    ``"random"`` (uniform, seeded by ``seed`` or ``POWERNET_SEED``).
    """
    J = p.J
    report = RequirementReport()
    if J > p.n_u:
        report.statuses["v_rank"] = Status(FAIL, witness={"J": J, "n_u": p.n_u},
                                           detail="more nodes than inputs")
        report.rank_margin = 0.0
        report.rank_margin_rel = 0.0
        return report
    xs, us = _arg_vars(p)
    if not np.any(p.G) or _constant_sensitivity(p):
        X = np.zeros((1, p.n_x))
        U = np.zeros((1, p.n_u))
        for m, conv in enumerate(p.converters):
            lo, hi = problem_arg_box(p, m)
            c, _, _ = _box_center(lo, hi)
            for j, (kind, idx) in enumerate(zip(conv.arg_kind, conv.arg_idx)):
                (X if kind == "x" else U)[0, idx] = c[j]
        dydu, _, _ = _sensitivities(p, X, U)
        rank, sJ, s1 = rank_margin(p.F, p.G, dydu[0], rank_tol)
        report.rank_margin, report.rank_margin_rel = sJ, (sJ / s1 if s1 else 0.0)
        if rank == J:
            report.statuses["v_rank"] = Status(CERTIFIED, detail="sensitivities are constant")
        else:
            report.statuses["v_rank"] = Status(FAIL, witness={"rank": rank, "sigma_J": sJ})
        return report

    boxes = np.hstack([p.x_lo[:-1, xs], p.x_hi[:-1, xs], p.u_lo[:, us], p.u_hi[:, us]])
    uniq, first = np.unique(boxes, axis=0, return_index=True)
    nx_, nu_ = len(xs), len(us)
    total = 0
    worst = (np.inf, np.inf, None)
    if sampling == "random":
        seed = int(os.environ.get("POWERNET_SEED", "0")) if seed is None else seed
        rng = np.random.default_rng(seed)
    for row, k0 in zip(uniq, first):
        lo = np.concatenate([row[:nx_], row[2 * nx_: 2 * nx_ + nu_]])
        hi = np.concatenate([row[nx_: 2 * nx_], row[2 * nx_ + nu_:]])
        lo, hi = _clip_box(lo, hi, clip)
        if sampling in ("halton", "grid"):
            pts = box_points(lo, hi, n)
        elif sampling == "random":
            if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
                raise ValueError("sampling needs a bounded box; pass clip= to override")
            pts = lo + rng.random((n, lo.size)) * (hi - lo)
        else:
            raise ValueError(f"unknown sampling {sampling!r}")
        P = pts.shape[0]
        X = np.zeros((P, p.n_x))
        U = np.zeros((P, p.n_u))
        X[:, xs] = pts[:, :nx_]
        U[:, us] = pts[:, nx_:]
        dydu, _, _ = _sensitivities(p, X, U)
        Mx = p.F[None] + np.einsum("jm,pmn->pjn", p.G, dydu)
        sv = np.linalg.svd(Mx, compute_uv=False)
        s1, sJ = sv[:, 0], sv[:, J - 1]
        rel = np.where(s1 > 0, sJ / np.where(s1 > 0, s1, 1.0), 0.0)
        i = int(np.argmin(rel))
        total += P
        if rel[i] < worst[1]:
            witness = {
                "step": int(k0),
                "x": {p.x_names[j]: float(X[i, j]) for j in xs},
                "u": {p.u_names[j]: float(U[i, j]) for j in us},
                "sigma_J": float(sJ[i]),
                "sigma_1": float(s1[i]),
            }
            worst = (float(sJ[i]), float(rel[i]), witness)
        report.rank_margin = min(report.rank_margin, float(np.min(sJ)))
    report.rank_margin_rel = worst[1]
    if worst[1] > rank_tol:
        report.statuses["v_rank"] = Status(SAMPLED, n_points=total)
    else:
        report.statuses["v_rank"] = Status(FAIL, n_points=total, witness=worst[2],
                                           detail="F + G dy/du loses row rank")
    return report


# --------------------------------------------------------------------------
# constraint qualification
# --------------------------------------------------------------------------


def stacked_xi(p: NetworkProblem, x, u, y) -> np.ndarray:
    """Dense constraint Jacobian over ``[x_0..x_K, u_0..u_{K-1}, y_0..y_{K-1}]``.

    Row blocks: converter equalities per step, the stacked dynamics
    ``Gamma_x x + Gamma_u u``, and node balances per step.
    """
    K, n_x, n_u, M, J = p.K, p.n_x, p.n_u, p.M, p.J
    nxc, nuc = (K + 1) * n_x, K * n_u
    ncol = nxc + nuc + K * M
    Xi = np.zeros((K * M + (K + 1) * n_x + K * J, ncol))
    for k in range(K):
        for m, conv in enumerate(p.converters):
            r = k * M + m
            gz, gy = conv.template.grad(conv.args(x[k], u[k]), y[k, m])
            gz = np.ravel(gz)
            for j, (kind, idx) in enumerate(zip(conv.arg_kind, conv.arg_idx)):
                col = k * n_x + idx if kind == "x" else nxc + k * n_u + idx
                Xi[r, col] += gz[j]
            Xi[r, nxc + nuc + k * M + m] = float(gy)
    r0 = K * M
    Xi[r0:r0 + (K + 1) * n_x, :nxc] = p.gamma_x.toarray()
    Xi[r0:r0 + (K + 1) * n_x, nxc:nxc + nuc] = p.gamma_u.toarray()
    r0 += (K + 1) * n_x
    for k in range(K):
        rows = slice(r0 + k * J, r0 + (k + 1) * J)
        Xi[rows, k * n_x:(k + 1) * n_x] = p.E
        Xi[rows, nxc + k * n_u: nxc + (k + 1) * n_u] = p.F
        Xi[rows, nxc + nuc + k * M: nxc + nuc + (k + 1) * M] = p.G
    return Xi


def psi_matrix(p: NetworkProblem, x, u, y) -> np.ndarray:
    """Reduced matrix ``I (x) (F + G dy/du) - (I (x) (E + G dy/dx)) Gamma_x^-1 Gamma_u``."""
    K, n_x, n_u, J = p.K, p.n_x, p.n_u, p.J
    blocks_u = np.zeros((K * J, K * n_u))
    blocks_x = np.zeros((K * J, K * n_x))
    for k in range(K):
        dydx, dydu = p.output_derivatives(x[k], u[k], y[k])
        blocks_u[k * J:(k + 1) * J, k * n_u:(k + 1) * n_u] = p.F + p.G @ dydu
        blocks_x[k * J:(k + 1) * J, k * n_x:(k + 1) * n_x] = p.E + p.G @ dydx
    gxgu = sla.solve_triangular(p.gamma_x.toarray(), p.gamma_u.toarray(), lower=True)
    return blocks_u - blocks_x @ gxgu[: K * n_x]


def numerical_rank(Mx, rank_tol: float = RANK_TOL) -> int:
    sv = np.linalg.svd(np.atleast_2d(Mx), compute_uv=False)
    if sv.size == 0 or sv[0] == 0:
        return 0
    return int(np.sum(sv > rank_tol * sv[0]))


def sample_manifold_points(p: NetworkProblem, n: int, seed: int | None = None,
                           clip: float = 10.0):
    """Random trajectories with states/inputs in their boxes and outputs on the converters.

    These are the points at which the requirements must hold; dynamics and
    node balances are not imposed since the Jacobian does not depend on them.
    """
    seed = int(os.environ.get("POWERNET_SEED", "0")) if seed is None else seed
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        xlo, xhi = _clip_box(p.x_lo, p.x_hi, clip)
        ulo, uhi = _clip_box(p.u_lo, p.u_hi, clip)
        x = xlo + rng.random(xlo.shape) * (xhi - xlo)
        u = ulo + rng.random(ulo.shape) * (uhi - ulo)
        y = np.stack([c.output(x[:-1], u) for c in p.converters], axis=-1) if p.M \
            else np.zeros((p.K, 0))
        out.append((x, u, y))
    return out


def check_licq(p: NetworkProblem, direct: bool = False, n_direct: int = 10,
               seed: int | None = None, **rank_kw) -> RequirementReport:
    """LICQ of the relaxed program through the per-step rank reduction.

    Requires ii and iv; a converter whose ``dh/dy`` can vanish raises
    SingularOutputDerivative. With ``direct`` the full stacked Jacobian is also
    factorized at ``n_direct`` random points (small horizons only).
    """
    report = RequirementReport()
    mono = []
    for m, conv in enumerate(p.converters):
        lo, hi = problem_arg_box(p, m)
        st = check_monotonic_output(conv, lo, hi)
        if st.state == FAIL and st.witness is not None and st.witness.get("dh_dy") == 0.0:
            raise SingularOutputDerivative(
                f"dh/dy vanishes for converter {conv.name!r} at {st.witness['z']}")
        mono.append(st)
    report.statuses["ii_monotonic"] = _combine(mono, [c.name for c in p.converters])
    report.statuses["iv_no_self_loop"] = check_network_structure(p)["iv_no_self_loop"]
    if not report.passed:
        report.statuses["licq"] = Status(FAIL, detail="requirements ii/iv not met")
        return report
    rank = check_rank(p, **rank_kw)
    report = report.merge(rank)
    st = rank.statuses["v_rank"]
    report.statuses["licq"] = Status(st.state, st.n_points, st.witness,
                                     "per-step blocks of the reduced Jacobian")
    if direct:
        pts = sample_manifold_points(p, n_direct, seed)
        worst = None
        for i, (x, u, y) in enumerate(pts):
            Xi = stacked_xi(p, x, u, y)
            r = numerical_rank(Xi)
            if r < Xi.shape[0]:
                worst = {"point": i, "rank": r, "rows": Xi.shape[0]}
                break
        report.statuses["licq_direct"] = (Status(SAMPLED, n_points=len(pts)) if worst is None
                                          else Status(FAIL, witness=worst))
    return report


def check_requirements(p: NetworkProblem, **rank_kw) -> RequirementReport:
    """All five requirements for an assembled problem."""
    report = RequirementReport()
    names = [c.name for c in p.converters]
    conv_st, mono_st = [], []
    for m, conv in enumerate(p.converters):
        lo, hi = problem_arg_box(p, m)
        conv_st.append(check_convexity(conv, lo, hi))
        mono_st.append(check_monotonic_output(conv, lo, hi))
    report.statuses["i_convexity"] = _combine(conv_st, names)
    report.statuses["ii_monotonic"] = _combine(mono_st, names)
    report.statuses.update(check_network_structure(p))
    if report.statuses["ii_monotonic"].state == FAIL:
        report.statuses["v_rank"] = Status(FAIL, detail="not evaluated: requirement ii fails")
        return report
    rank_kw.setdefault("clip", 1e3)
    return report.merge(check_rank(p, **rank_kw))
