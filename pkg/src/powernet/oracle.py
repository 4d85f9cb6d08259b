"""Brute-force reference solutions for small instances.

Dynamic programming over state grids for the eco-driving and series-hybrid
scenarios, and exhaustive input enumeration for toy networks. Both work with
the original converter equalities (outputs are computed from the templates,
never relaxed) and build their transitions from the physical scenario data in
``problem.meta`` rather than from the assembled network matrices, so they are
independent of the transcription being checked.

Grids contain the initial state and are nested when ``count - 1`` doubles,
and energy transitions land exactly on grid nodes. On the eco-driving
instance elapsed time is a second state: the default scheme bins it and keeps
the exact time of each kept label, so every returned trajectory is feasible
and the DP value is an upper bound on the nonconvex optimum.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .network import NetworkProblem

INF = np.inf


@dataclass(frozen=True)
class GridSpec:
    """State grid of a DP run.

    ``counts`` gives the number of nodes per state dimension (eco-driving:
    kinetic energy then elapsed-time bins; hybrid: battery energy). ``ranges``
    narrows the state box per dimension. ``input_counts`` is the per-input
    resolution of the toy enumeration. ``interpolation`` selects the time
    treatment on the eco-driving instance: ``nearest`` bins labels that carry
    their exact elapsed time, ``linear`` runs backward value iteration with
    the value interpolated in time (slightly optimistic near the time limit).
    """

    counts: tuple
    ranges: tuple | None = None
    input_counts: tuple = ()
    interpolation: str = "nearest"

    def __post_init__(self):
        counts = tuple(int(c) for c in np.atleast_1d(self.counts))
        if any(c < 2 for c in counts):
            raise ValueError("grid counts must be at least 2")
        if self.interpolation not in ("nearest", "linear"):
            raise ValueError("interpolation must be 'nearest' or 'linear'")
        if self.ranges is not None and len(self.ranges) != len(counts):
            raise ValueError("one range per state dimension")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "input_counts", tuple(int(c) for c in self.input_counts))


@dataclass
class DPResult:
    value: float
    trajectory: dict | None  # x, u, y, s in the network's variable order
    grid_sizes: tuple
    feasible: bool = True


def anchored_grid(lo, hi, count, anchor):
    """Nodes ``anchor + i h`` inside ``[lo, hi]`` with ``h = (hi - lo) / (count - 1)``.

    Halving ``h`` (doubling ``count - 1``) gives a superset, which keeps DP
    values monotone under refinement.
    """
    if not lo <= anchor <= hi:
        raise ValueError("grid anchor outside the range")
    h = (hi - lo) / (count - 1)
    i_lo = -int(np.floor((anchor - lo) / h + 1e-9))
    i_hi = int(np.floor((hi - anchor) / h + 1e-9))
    return anchor + h * np.arange(i_lo, i_hi + 1), -i_lo


def _indices(p: NetworkProblem):
    xi = {n: i for i, n in enumerate(p.x_names)}
    ui = {n: i for i, n in enumerate(p.u_names)}
    yi = {n: m for m, n in enumerate(p.y_names)}
    ji = {n: j for j, n in enumerate(p.node_names)}
    return xi, ui, yi, ji


def dp_solve(p: NetworkProblem, g: GridSpec, horizon: int | None = None) -> DPResult:
    """Backward value iteration on a state grid.

    Parameters
    ----------
    p : NetworkProblem
        An eco-driving or series-hybrid problem (``meta["scenario"]``).
    g : GridSpec
    horizon : int, optional
        Solve over the first ``horizon`` steps only; ``0`` gives cost 0.

    Raises
    ------
    ValueError
        Unsupported scenario, more than two states or more than 100 steps.
    """
    K = p.K if horizon is None else int(horizon)
    if K < 0 or K > p.K:
        raise ValueError("horizon out of range")
    if p.n_x > 2:
        raise ValueError("dynamic programming is limited to two states")
    if K > 100:
        raise ValueError("dynamic programming is limited to 100 steps")
    if K == 0:
        return DPResult(0.0, None, ())
    kind = p.meta.get("scenario")
    if kind == "eco_driving":
        return _dp_eco(p, g, K)
    if kind == "cvem":
        return _dp_cvem(p, g, K)
    raise ValueError(f"no dynamic program for scenario {kind!r}")


# --------------------------------------------------------------------------
# eco-driving
# --------------------------------------------------------------------------


def _eco_data(p, g: GridSpec, K):
    meta = p.meta
    veh, bnd = meta["vehicle"], meta["bounds"]
    m, m_e, grav, c_r, ds = veh["m"], veh["m_e"], veh["g"], veh["c_r"], veh["delta_s"]
    grade = np.asarray(meta["grade"])[:K]
    c_kin = 0.5 * m_e / 1e6  # MJ per (m/s)^2
    B = meta["B_d_m"] / 1e3  # MJ per kN
    f = -B * m * grav * (np.sin(grade) + c_r * np.cos(grade)) / 1e3
    kin_lo = bnd["v_input_min"] if bnd.get("kin_input_min") is None else bnd["kin_input_min"]
    E_lo, E_hi = c_kin * bnd["v_min"] ** 2, c_kin * bnd["v_max"] ** 2
    if g.ranges is not None:
        E_lo, E_hi = max(E_lo, g.ranges[0][0]), min(E_hi, g.ranges[0][1])
    E, i0 = anchored_grid(E_lo, E_hi, g.counts[0], c_kin * meta["v_init"] ** 2)
    v = np.sqrt(E / c_kin)
    ok_v = (v >= max(bnd["v_input_min"], kin_lo) - 1e-12) & (v <= bnd["v_input_max"] + 1e-12)
    final = np.ones(E.size, bool)
    if bnd.get("v_final_min") is not None:
        final = E >= c_kin * bnd["v_final_min"] ** 2 - 1e-12
    lims = (-bnd["force_brake"] / 1e3, bnd["force_max"] / 1e3,
            -bnd["force_regen"] / 1e3, bnd["force_max"] / 1e3)
    return dict(E=E, i0=i0, v=v, ok_v=ok_v, final=final, dt=ds / v, c_kin=c_kin,
                A=meta["A_d"], B=B, f=f, lims=lims, T_max=meta["T_max"])


def _eco_stage(d, k):
    """Machine force and cost of every energy transition ``i -> j`` at step ``k``."""
    E, (u_lo, u_hi, em_lo, em_hi) = d["E"], d["lims"]
    u_kin = (E[None, :] - d["A"] * E[:, None] - d["f"][k]) / d["B"]
    u_em = np.maximum(u_kin, em_lo)  # regenerate as much as allowed, brake the rest
    ok = (u_kin >= u_lo - 1e-9) & (u_kin <= u_hi + 1e-9) & (u_em <= em_hi + 1e-9)
    ok &= d["ok_v"][:, None]
    return np.where(ok, u_em, INF), u_kin, u_em


def _dp_eco(p, g: GridSpec, K):
    d = _eco_data(p, g, K)
    nT = g.counts[1] if len(g.counts) > 1 else 50
    if g.interpolation == "linear":
        path, value = _eco_backward(d, K, nT)
    else:
        path, value = _eco_labels(d, K, nT)
    sizes = (d["E"].size, nT)
    if path is None:
        return DPResult(INF, None, sizes, feasible=False)
    return DPResult(value, _eco_trajectory(p, d, path), sizes)


def _eco_energy_only(d, K, lam):
    """One-dimensional DP on energy with time priced at ``lam``; returns the path."""
    E = d["E"]
    n = E.size
    V = np.where(d["final"], 0.0, INF)
    policy = []
    for k in range(K - 1, -1, -1):
        stage, _, _ = _eco_stage(d, k)
        tot = stage + lam * d["dt"][:, None] + V[None, :]
        j = np.argmin(tot, axis=1)
        V = tot[np.arange(n), j]
        policy.append(j)
    policy.reverse()
    if not np.isfinite(V[d["i0"]]):
        return None
    path = [d["i0"]]
    for k in range(K):
        path.append(int(policy[k][path[-1]]))
    return path


def _eco_path_cost(d, path):
    K = len(path) - 1
    c = sum(_eco_stage(d, k)[0][path[k], path[k + 1]] for k in range(K))
    return float(c), float(d["dt"][path[:-1]].sum())


def time_price(d, K, iters=60):
    """Smallest price of time whose energy-only DP meets the time limit.

    Returns ``(lam, path)``; ``path`` is None when no price makes the grid
    problem feasible.
    """
    T_max = d["T_max"] + 1e-9
    path = _eco_energy_only(d, K, 0.0)
    if path is None:
        return 0.0, None
    if _eco_path_cost(d, path)[1] <= T_max:
        return 0.0, path
    lo, hi = 0.0, 1.0
    while True:
        path = _eco_energy_only(d, K, hi)
        if _eco_path_cost(d, path)[1] <= T_max:
            break
        lo, hi = hi, 2 * hi
        if hi > 1e12:
            return lo, None
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        cand = _eco_energy_only(d, K, mid)
        if _eco_path_cost(d, cand)[1] <= T_max:
            hi, path = mid, cand
        else:
            lo = mid
    return hi, path


def _eco_labels(d, K, nT):
    # Forward labelling: each (energy node, time bin) cell keeps one label with
    # its exact elapsed time, so every trajectory found is feasible. Within a
    # cell labels are ranked by cost plus the time price of the energy-only DP.
    E, dt, T_max = d["E"], d["dt"], d["T_max"]
    lam, lag_path = time_price(d, K)
    n = E.size
    ht = T_max / nT
    cost = np.full((n, nT), INF)
    time = np.zeros((n, nT))
    cost[d["i0"], 0] = 0.0
    back = []
    for k in range(K):
        stage, _, _ = _eco_stage(d, k)
        src = np.flatnonzero(np.isfinite(cost))
        i = src // nT
        t_new = time.ravel()[src] + dt[i]
        keep = t_new <= T_max + 1e-9
        src, i, t_new = src[keep], i[keep], t_new[keep]
        c_new = (cost.ravel()[src][:, None] + stage[i]).ravel()
        b_new = np.minimum((t_new / ht).astype(np.int64), nT - 1)
        tgt = (np.arange(n)[None, :] * nT + b_new[:, None]).ravel()
        row = np.repeat(np.arange(src.size), n)
        fin = np.isfinite(c_new)
        c_new, tgt, row = c_new[fin], tgt[fin], row[fin]
        t_flat = t_new[row]
        order = np.lexsort((c_new + lam * t_flat, tgt))
        first = order[np.r_[True, tgt[order][1:] != tgt[order][:-1]]] if order.size else order
        cost = np.full((n, nT), INF)
        time = np.zeros((n, nT))
        par = np.full((n, nT), -1, dtype=np.int64)
        cost.ravel()[tgt[first]] = c_new[first]
        time.ravel()[tgt[first]] = t_flat[first]
        par.ravel()[tgt[first]] = src[row[first]]
        back.append(par)
    cost[~d["final"]] = INF
    best_path, best = None, INF
    if np.isfinite(cost).any():
        cell = int(np.argmin(cost))
        best = float(cost.ravel()[cell])
        best_path = [cell // nT]
        for par in reversed(back):
            cell = int(par.ravel()[cell])
            best_path.append(cell // nT)
        best_path.reverse()
    # the priced energy-only path is feasible too; keep the cheaper one
    if lag_path is not None:
        c_lag, _ = _eco_path_cost(d, lag_path)
        if c_lag < best:
            best_path, best = lag_path, c_lag
    return best_path, best


def _eco_backward(d, K, nT):
    # Backward value iteration with the value linearly interpolated in time;
    # interpolation against an infeasible node counts as infeasible.
    E, dt, T_max = d["E"], d["dt"], d["T_max"]
    n = E.size
    tg = np.linspace(0.0, T_max, nT)
    ht = tg[1]
    V = np.where(d["final"][:, None], 0.0, INF) * np.ones((1, nT))
    policy = []
    for k in range(K - 1, -1, -1):
        stage, _, _ = _eco_stage(d, k)
        Vn = np.full((n, nT), INF)
        arg = np.zeros((n, nT), dtype=np.int64)
        for i in np.flatnonzero(d["ok_v"]):
            t = tg + dt[i]
            lo = np.floor(t / ht + 1e-12).astype(np.int64)
            w = t / ht - lo
            ok = lo <= nT - 1
            lo_c, hi_c = np.minimum(lo, nT - 1), np.minimum(lo + 1, nT - 1)
            Vl, Vh = V[:, lo_c], V[:, hi_c]
            exact = w < 1e-9
            with np.errstate(invalid="ignore"):
                Vt = np.where(exact, Vl, (1 - w) * Vl + w * Vh)
            Vt = np.where(ok[None, :], Vt, INF)
            tot = stage[i][:, None] + Vt
            j = np.argmin(tot, axis=0)
            Vn[i] = tot[j, np.arange(nT)]
            arg[i] = j
        V = Vn
        policy.append(arg)
    policy.reverse()
    if not np.isfinite(V[d["i0"], 0]):
        return None, INF
    path, i, t = [d["i0"]], d["i0"], 0.0
    for k in range(K):
        a = min(int(round(t / ht)), nT - 1)
        i = int(policy[k][i, a])
        t += dt[path[-1]]
        path.append(i)
    value = sum(_eco_stage(d, k)[0][path[k], path[k + 1]] for k in range(K))
    return path, float(value)


def _eco_trajectory(p, d, path):
    xi, ui, yi, ji = _indices(p)
    K = len(path) - 1
    E, v, c_kin = d["E"], d["v"], d["c_kin"]
    x = np.zeros((K + 1, p.n_x))
    u = np.zeros((K, p.n_u))
    y = np.zeros((K, p.M))
    s = np.zeros((K, p.J))
    x[0, xi["kin"]] = E[path[0]]
    for k in range(K):
        i, j = path[k], path[k + 1]
        _, u_kin, u_em = _eco_stage(d, k)
        u[k, ui["kin"]] = u_kin[i, j]
        u[k, ui["em"]] = u_em[i, j]
        u[k, ui["v"]] = u[k, ui["leth"]] = v[i]
        u[k, ui["time"]] = 1.0 / v[i]
        y[k, yi["em"]] = u_em[i, j]
        y[k, yi["v"]] = c_kin * v[i] ** 2
        y[k, yi["leth"]] = 1.0 / v[i]
        s[k, ji["brake"]] = u_em[i, j] - u_kin[i, j]
        x[k + 1, xi["kin"]] = E[j]
        x[k + 1, xi["time"]] = x[k, xi["time"]] + d["dt"][i]
    return {"x": x, "u": u, "y": y, "s": s}


# --------------------------------------------------------------------------
# series hybrid
# --------------------------------------------------------------------------


def _poly(coef, scale=1e3):
    a2, a1, a0 = coef
    return a2 * scale, a1, a0 / scale  # kW units


def _dp_cvem(p, g: GridSpec, K):
    c = p.meta["params"]
    v_p = np.asarray(c["v_p"])[:K] / 1e3
    dT = c["delta_T"]
    fs, ff, fe = (_poly(c["coef"][n]) for n in ("s", "f", "em"))
    x0 = c["x_init"] / 1e3
    xK_lo = c["xK_lo"] / 1e3
    # default range: charge levels reachable from x0 within the horizon
    reach = K * dT * c["p_s_max"] / 1e3
    x_lo, x_hi = max(c["x_lo"] / 1e3, x0 - reach), min(c["x_hi"] / 1e3, x0 + reach)
    if g.ranges is not None:
        x_lo, x_hi = max(x_lo, g.ranges[0][0]), min(x_hi, g.ranges[0][1])
    X, i0 = anchored_grid(x_lo, x_hi, g.counts[0], x0)
    ps = c["p_s_max"] / 1e3
    f_hi = c["p_f_max"] / 1e3
    em_lo, em_hi = c["p_em_min"] / 1e3, c["p_em_max"] / 1e3

    # battery transition i -> j is independent of k
    u_s = (X[None, :] - X[:, None]) / dT
    y_s = fs[0] * u_s**2 + fs[1] * u_s + fs[2]
    ok_s = np.abs(u_s) <= ps + 1e-9
    # machine: y_em = -y_s; largest admissible root delivers the most power
    qa, qb, qc = fe[0], fe[1], fe[2] + y_s
    if qa > 0:
        disc = qb * qb - 4 * qa * qc
        okd = disc >= 0
        sq = np.sqrt(np.where(okd, disc, 0.0))
        roots = np.stack([(-qb + sq) / (2 * qa), (-qb - sq) / (2 * qa)])
        inb = okd[None] & (roots >= em_lo - 1e-9) & (roots <= em_hi + 1e-9)
        u_em = np.where(inb[0], roots[0], np.where(inb[1], roots[1], np.nan))
    else:
        u_em = -qc / qb
        u_em = np.where((u_em >= em_lo - 1e-9) & (u_em <= em_hi + 1e-9), u_em, np.nan)
    ok_em = ok_s & np.isfinite(u_em)
    u_em = np.where(ok_em, u_em, 0.0)
    braking = c["allow_braking"]

    def stage(k):
        need = v_p[k] - u_em
        if braking:
            # cheapest engine power on [max(0, need), f_hi]
            lo = np.maximum(0.0, need)
            if ff[0] > 0:
                uf = np.clip(-ff[1] / (2 * ff[0]), lo, f_hi)
            else:
                uf = lo if ff[1] >= 0 else np.full_like(lo, f_hi)
        else:
            uf = need
        ok = ok_em & (uf >= -1e-9) & (uf <= f_hi + 1e-9) & (uf >= need - 1e-9)
        yf = ff[0] * uf**2 + ff[1] * uf + ff[2]
        return np.where(ok, yf, INF), uf

    V = np.where(X >= xK_lo - 1e-9, 0.0, INF)
    policy = []
    for k in range(K - 1, -1, -1):
        cost, _ = stage(k)
        tot = cost + V[None, :]
        j = np.argmin(tot, axis=1)
        V = tot[np.arange(X.size), j]
        policy.append(j)
    policy.reverse()
    value = float(V[i0])
    if not np.isfinite(value):
        return DPResult(INF, None, (X.size,), feasible=False)

    xi, ui, yi, ji = _indices(p)
    x = np.zeros((K + 1, p.n_x))
    u = np.zeros((K, p.n_u))
    y = np.zeros((K, p.M))
    s = np.zeros((K, p.J))
    i = i0
    x[0, 0] = X[i]
    for k in range(K):
        j = policy[k][i]
        _, uf = stage(k)
        u[k, ui["battery"]] = u_s[i, j]
        u[k, ui["f"]] = uf[i, j]
        u[k, ui["em"]] = u_em[i, j]
        y[k, yi["s"]] = y_s[i, j]
        y[k, yi["em"]] = -y_s[i, j]
        y[k, yi["f"]] = ff[0] * uf[i, j] ** 2 + ff[1] * uf[i, j] + ff[2]
        s[k, ji["drive"]] = uf[i, j] + u_em[i, j] - v_p[k]
        i = j
        x[k + 1, 0] = X[i]
    return DPResult(value, {"x": x, "u": u, "y": y, "s": s}, (X.size,))


# --------------------------------------------------------------------------
# toy enumeration
# --------------------------------------------------------------------------


@dataclass
class EnumResult:
    value: float
    point: dict | None
    n_feasible: int
    n_points: int

    @property
    def empty(self) -> bool:
        return self.n_feasible == 0


def enumerate_toy(p: NetworkProblem, resolution=101, eq_tol: float = 1e-9) -> EnumResult:
    """Exhaustive scan of every input on a uniform grid (at most 3 scalar inputs in total).

    ``resolution`` is a point count per input, or a GridSpec whose
    ``input_counts`` list one count per input. States follow the dynamics,
    outputs follow the converter equalities and node slacks are read off the
    balances: dissipative slacks must be non-negative and conservative ones
    zero to ``eq_tol``. An empty feasible set gives value ``inf``.
    """
    n = p.K * p.n_u
    if n > 3:
        raise ValueError(f"toy enumeration handles at most 3 scalar inputs, got {n}")
    if isinstance(resolution, GridSpec):
        counts = resolution.input_counts
        if len(counts) != p.n_u:
            raise ValueError("one input count per input")
    else:
        counts = (int(resolution),) * p.n_u
    if min(counts) < 2:
        raise ValueError("resolution must be at least 2")
    if not (np.all(np.isfinite(p.u_lo)) and np.all(np.isfinite(p.u_hi))):
        raise ValueError("input box must be bounded")
    lo, hi = np.broadcast_to(p.u_lo, (p.K, p.n_u)), np.broadcast_to(p.u_hi, (p.K, p.n_u))
    axes = [np.linspace(lo[k, i], hi[k, i], counts[i]) if hi[k, i] > lo[k, i]
            else np.array([lo[k, i]]) for k in range(p.K) for i in range(p.n_u)]
    best, best_pt, n_feas, n_pts = INF, None, 0, 0
    for combo in itertools.product(*axes):
        n_pts += 1
        u = np.array(combo).reshape(p.K, p.n_u)
        x = np.zeros((p.K + 1, p.n_x))
        x[0] = p.x_init
        for k in range(p.K):
            x[k + 1] = p.A @ x[k] + p.B @ u[k] + p.f[k]
        if np.any(x < p.x_lo - 1e-12) or np.any(x > p.x_hi + 1e-12):
            continue
        y = np.stack([c.output(x[:-1], u) for c in p.converters], axis=-1) if p.M \
            else np.zeros((p.K, 0))
        if not np.all(np.isfinite(y)):
            continue
        s = p.v - x[:-1] @ p.E.T - u @ p.F.T - y @ p.G.T
        if np.any(s[:, p.dissipative] < -eq_tol) or np.any(np.abs(s[:, ~p.dissipative]) > eq_tol):
            continue
        n_feas += 1
        cost = p.cost(u, y)
        if cost < best:
            best, best_pt = cost, {"x": x, "u": u, "y": y, "s": s}
    return EnumResult(best, best_pt, n_feas, n_pts)
