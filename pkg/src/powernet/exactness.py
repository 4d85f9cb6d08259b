"""Exactness of the relaxation at a solved point.

:func:`audit` measures how far each relaxed converter sits from its equality
and reads the sign of ``b + G' lambda`` from the node multipliers: a converter
may only be slack where that reduced cost vanishes. :func:`solve_exact`
regularizes slack outputs until every converter is tight, and
:func:`feasible_projection` rebuilds a point of the original (nonconvex)
problem from a relaxed solution, giving an upper bound on its optimum.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import NoDissipativePath, NotExactified, NotSolved
from .network import NetworkProblem
from .solver import OPTIMAL, Solution, solve
from .transcription import ConicProgram, add_regularization, build_relaxation

TIGHT = "tight"
SLACK_ZERO_DUAL = "slack-zero-dual"
ANOMALOUS = "anomalous"


@dataclass
class ExactnessReport:
    """Per-converter, per-step tightness and dual-sign summary.

    ``residual`` is the relative output gap ``|y - y_model| / (1 + |y|)``, which
    equals ``|h| / (1 + |y|)`` for the polynomial templates.
    """

    names: tuple
    residual: np.ndarray  # (K, M)
    tight: np.ndarray  # (K, M) bool
    reduced_cost: np.ndarray  # b + G' lambda_k, (K, M)
    mu: np.ndarray  # converter multipliers, (K, M)
    classes: np.ndarray  # (K, M) str
    tight_tol: float
    dual_tol: float
    cost: float
    trace: list = field(default_factory=list)

    @property
    def all_tight(self) -> bool:
        return bool(np.all(self.tight))

    @property
    def anomalous(self) -> list:
        return [(int(k), self.names[m]) for k, m in np.argwhere(self.classes == ANOMALOUS)]

    @property
    def solver_accuracy_issue(self) -> bool:
        return bool(np.any(self.classes == ANOMALOUS))

    def max_residual(self, converter=None) -> float:
        if converter is None:
            return float(self.residual.max()) if self.residual.size else 0.0
        m = self.names.index(converter) if isinstance(converter, str) else int(converter)
        return float(self.residual[:, m].max()) if self.residual.size else 0.0

    def slack_steps(self, converter) -> np.ndarray:
        m = self.names.index(converter) if isinstance(converter, str) else int(converter)
        return np.flatnonzero(~self.tight[:, m])

    def to_dict(self) -> dict:
        per = {}
        for m, name in enumerate(self.names):
            col = self.residual[:, m]
            per[name] = {
                "max_residual": float(col.max()) if col.size else 0.0,
                "mean_residual": float(col.mean()) if col.size else 0.0,
                "slack_steps": int(np.sum(~self.tight[:, m])),
                "anomalous_steps": int(np.sum(self.classes[:, m] == ANOMALOUS)),
                "min_reduced_cost": float(self.reduced_cost[:, m].min()) if col.size else 0.0,
            }
        return {
            "all_tight": self.all_tight,
            "tight_tol": self.tight_tol,
            "max_residual": self.max_residual(),
            "cost": self.cost,
            "min_reduced_cost": float(self.reduced_cost.min()) if self.reduced_cost.size else 0.0,
            "solver_accuracy_issue": self.solver_accuracy_issue,
            "converters": per,
            "rounds": self.trace,
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def to_csv(self, path) -> None:
        """One row per step with the relative residual of every converter."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", *(f"residual_{n}" for n in self.names)])
            for k, row in enumerate(self.residual):
                w.writerow([k, *(repr(float(v)) for v in row)])


def converter_residuals(p: NetworkProblem, x, u, y) -> np.ndarray:
    """Relative output gaps ``|y - y_model(x, u)| / (1 + |y|)`` as a (K, M) array."""
    out = np.zeros((p.K, p.M))
    for m, conv in enumerate(p.converters):
        model = conv.output(x[:-1], u)
        out[:, m] = np.abs(y[:, m] - model) / (1.0 + np.abs(y[:, m]))
    return out


def audit(sol: Solution, p: NetworkProblem | None = None, tight_tol: float = 1e-5,
          dual_tol: float | None = None) -> ExactnessReport:
    """Classify each converter instance as tight, benign slack or anomalous.

    A slack converter is benign when its reduced cost ``b + G' lambda_k`` is
    (numerically) zero; a slack converter with a positive reduced cost cannot
    occur at an exact optimum and points at an inaccurate solve.
    """
    if sol.status != OPTIMAL:
        raise NotSolved(f"solution status is {sol.status!r}")
    if sol.cp is None or sol.cp.layout is None:
        raise ValueError("audit needs a solution of a network program")
    p = sol.cp.problem if p is None else p
    dual_tol = tight_tol if dual_tol is None else dual_tol
    x, u, y, _ = sol.trajectories()
    res = converter_residuals(p, x, u, y)
    tight = res <= tight_tol
    red = sol.output_reduced_costs()
    mu = sol.multipliers()
    classes = np.full(res.shape, TIGHT, dtype=object)
    classes[~tight] = SLACK_ZERO_DUAL
    classes[~tight & (red > dual_tol)] = ANOMALOUS
    return ExactnessReport(
        names=tuple(c.name for c in p.converters), residual=res, tight=tight,
        reduced_cost=red, mu=mu, classes=classes.astype(str), tight_tol=tight_tol,
        dual_tol=dual_tol, cost=float(sol.cp.base_cost(sol.primal)),
    )


def _drift(c_new, c_ref):
    return abs(c_new - c_ref) / max(abs(c_ref), 1e-12)


def solve_exact(p: NetworkProblem, sigma0: float = 0.01, max_rounds: int = 5,
                tight_tol: float = 1e-5, cost_tol: float = 1e-3, tol: float = 1e-8,
                max_iter: int = 100, backend: str = "ipm", force: bool = False,
                regularize: dict | None = None, cp: ConicProgram | None = None):
    """Solve the relaxation and regularize slack converter outputs until it is exact.

    Each round adds ``sigma * y`` for every slack output (``sigma`` halves per
    round). When the base cost drifts by more than ``cost_tol`` the round falls
    back to regularizing one converter at a time and keeps only the converters
    that leave the optimum unchanged.

    ``regularize`` preloads weights ``{converter name: sigma}`` on every step.

    Returns
    -------
    (Solution, ExactnessReport)

    Raises
    ------
    NotSolved
        A solve did not reach optimality.
    NotExactified
        Slack converters remain after ``max_rounds``.
    """
    base = build_relaxation(p, force=force) if cp is None else cp
    lay = base.layout

    def run(weights):
        prog = add_regularization(base, weights) if weights else base
        s = solve(prog, tol=tol, max_iter=max_iter, backend=backend)
        if s.status != OPTIMAL:
            raise NotSolved(f"solver stopped with status {s.status!r}")
        return s

    weights = {}
    for name, sig in (regularize or {}).items():
        m = p.converter_index(name)
        for k in range(p.K):
            weights[int(lay.iy(k, m))] = float(sig)
    sol = run(weights)
    rep = audit(sol, p, tight_tol)
    ref_cost = rep.cost
    trace = []
    for r in range(max_rounds):
        if rep.all_tight:
            break
        sigma = sigma0 * 0.5**r
        groups = {}
        for k, m in np.argwhere(~rep.tight):
            groups.setdefault(int(m), []).append(int(lay.iy(k, m)))
        entry = {"round": r + 1, "sigma": sigma, "cost_before": rep.cost,
                 "max_residual_before": rep.max_residual(),
                 "targets": {rep.names[m]: len(v) for m, v in groups.items()}}
        trial = dict(weights)
        for idx in (i for v in groups.values() for i in v):
            trial[idx] = trial.get(idx, 0.0) + sigma
        cand = run(trial)
        cand_rep = audit(cand, p, tight_tol)
        if _drift(cand_rep.cost, ref_cost) > cost_tol:
            # one converter at a time, keeping those that leave the optimum alone
            kept = []
            trial = dict(weights)
            cand, cand_rep = None, None
            for m, idxs in groups.items():
                t2 = dict(trial)
                for idx in idxs:
                    t2[idx] = t2.get(idx, 0.0) + sigma
                s2 = run(t2)
                r2 = audit(s2, p, tight_tol)
                if _drift(r2.cost, ref_cost) <= cost_tol:
                    trial, cand, cand_rep = t2, s2, r2
                    kept.append(rep.names[m])
            entry["fallback_kept"] = kept
            if cand is None:
                entry["cost_after"] = rep.cost
                entry["max_residual_after"] = rep.max_residual()
                trace.append(entry)
                break
        weights = trial
        sol, rep = cand, cand_rep
        entry["cost_after"] = rep.cost
        entry["max_residual_after"] = rep.max_residual()
        entry["drift"] = _drift(rep.cost, ref_cost)
        trace.append(entry)
    rep.trace = trace
    if not rep.all_tight:
        raise NotExactified(
            f"{int(np.sum(~rep.tight))} converter instances still slack after "
            f"{len(trace)} rounds (max residual {rep.max_residual():.3e})", sol, rep)
    return sol, rep


# --------------------------------------------------------------------------
# projection onto the original problem
# --------------------------------------------------------------------------


def _uncoupled_inputs(p: NetworkProblem) -> dict:
    """Buffer inputs that can absorb a node imbalance.

    An input qualifies when it drives a buffer whose states appear in no node
    and in no converter, and it appears in exactly one node. Maps input index
    to ``(node, buffer states)``.
    """
    conv_x = {int(i) for c in p.converters for i in c.own_x}
    conv_u = {int(i) for c in p.converters for i in c.own_u}
    out = {}
    for i in range(p.n_u):
        if i in conv_u:
            continue
        states = np.flatnonzero(p.B[:, i])
        if states.size == 0:
            continue
        # the state's whole dynamic block must be isolated from nodes and converters
        block = set(states.tolist())
        grow = True
        while grow:
            new = set(np.flatnonzero(np.any(p.A[:, sorted(block)] != 0, axis=1)).tolist()) | \
                set(np.flatnonzero(np.any(p.A[sorted(block), :] != 0, axis=0)).tolist())
            grow = not new <= block
            block |= new
        block = sorted(block)
        if np.any(p.E[:, block] != 0) or any(j in conv_x for j in block):
            continue
        nodes = np.flatnonzero(p.F[:, i])
        if nodes.size == 1:
            out[i] = (int(nodes[0]), block)
    return out


def _owned_single_input(p, m):
    conv = p.converters[m]
    if len(conv.arg_idx) != 1 or conv.arg_kind[0] != "u" or conv.x_idx.size:
        return None
    i = int(conv.arg_idx[0])
    # the input must belong to the converter, not to a buffer
    if np.any(p.B[:, i] != 0):
        return None
    return i


def feasible_projection(sol: Solution, p: NetworkProblem | None = None,
                        tight_tol: float = 1e-5, feas_tol: float = 1e-7):
    """Rebuild a feasible point of the original problem from a relaxed solution.

    For every slack converter the output is lowered onto the converter
    equality and the surplus is pushed into a dissipative node slack, or into
    the input of an isolated buffer (e.g. elapsed time) which is then
    re-simulated. Where a node is conservative and nothing can absorb the
    surplus, the converter input is moved onto the equality instead and the
    change is propagated through the converter-owned inputs of that node.

    Returns
    -------
    point : dict
        ``x``, ``u``, ``y``, ``s`` trajectories of the original problem.
    upper : float
        Original cost at ``point``, an upper bound on the nonconvex optimum.

    Raises
    ------
    NoDissipativePath
        No admissible way to absorb a slack converter's surplus was found.
    """
    if sol.status != OPTIMAL:
        raise NotSolved(f"solution status is {sol.status!r}")
    p = sol.cp.problem if p is None else p
    lay = sol.cp.layout
    x, u, y, s_d = (a.copy() for a in sol.trajectories())
    K, M = p.K, p.M
    s = np.zeros((K, p.J))
    s[:, lay.diss] = s_d
    s = np.maximum(s, 0.0)
    res = converter_residuals(p, x, u, y)
    if np.all(res <= tight_tol):
        return {"x": x, "u": u, "y": y, "s": s}, p.cost(u, y)

    absorbers = _uncoupled_inputs(p)
    touched_buffers = set()

    def model(m, k):
        return float(p.converters[m].output(x[k], u[k]))

    def lower_output(m, k):
        # option A: y onto the model, surplus into slacks or isolated buffer inputs
        delta = model(m, k) - y[k, m]  # <= 0 on the relaxed set
        plan = []
        for j in np.flatnonzero(p.G[:, m]):
            imb = p.G[j, m] * delta  # change of the node's left-hand side
            if p.dissipative[j]:
                plan.append(("s", j, -imb))
                continue
            opts = [i for i, (jj, _) in absorbers.items() if jj == j]
            done = False
            for i in opts:
                du = -imb / p.F[j, i]
                new = u[k, i] + du
                if p.u_lo[k, i] - feas_tol <= new <= p.u_hi[k, i] + feas_tol:
                    plan.append(("u", i, du))
                    done = True
                    break
            if not done:
                return False
        for kind, idx, d in plan:
            if kind == "s":
                s[k, idx] += d
            else:
                u[k, idx] += d
                touched_buffers.add(idx)
        y[k, m] += delta
        return True

    def move_input(m, k, queue):
        # option B: keep y, move the converter's own input onto the equality
        i = _owned_single_input(p, m)
        if i is None:
            return False
        tmpl = p.converters[m].template
        new = tmpl.inverse(y[k, m], p.u_lo[k, i], p.u_hi[k, i], u[k, i])
        if new is None:
            return False
        du = float(np.clip(new, p.u_lo[k, i], p.u_hi[k, i])) - u[k, i]
        plan = [("u", i, du)]
        for j in np.flatnonzero(p.F[:, i]):
            imb = p.F[j, i] * du
            if p.dissipative[j] and s[k, j] - imb >= -feas_tol:
                plan.append(("s", j, -imb))
                continue
            done = False
            for i2 in np.flatnonzero(p.F[j]):
                if i2 == i or np.count_nonzero(p.F[:, i2]) != 1:
                    continue
                owners = [m2 for m2 in range(M) if _owned_single_input(p, m2) == i2]
                if not owners:
                    continue
                d2 = -imb / p.F[j, i2]
                new2 = u[k, i2] + d2
                if not p.u_lo[k, i2] - feas_tol <= new2 <= p.u_hi[k, i2] + feas_tol:
                    continue
                plan.append(("u", int(i2), d2))
                queue.extend(owners)
                done = True
                break
            if not done:
                return False
        for kind, idx, d in plan:
            if kind == "s":
                s[k, idx] += d
            else:
                u[k, idx] += d
        return True

    for k in range(K):
        queue = [int(m) for m in np.flatnonzero(res[k] > tight_tol)]
        budget = 4 * M + 4
        while queue:
            budget -= 1
            if budget < 0:
                raise NoDissipativePath(f"step {k}: projection did not settle")
            m = queue.pop(0)
            gap = (y[k, m] - model(m, k)) / (1.0 + abs(y[k, m]))
            if abs(gap) <= tight_tol:
                continue
            if gap < -feas_tol:
                raise NoDissipativePath(
                    f"step {k}: converter {p.converters[m].name!r} pushed outside its relaxation")
            if lower_output(m, k):
                continue
            if not move_input(m, k, queue):
                raise NoDissipativePath(
                    f"step {k}: no dissipative node or free input absorbs the surplus of "
                    f"converter {p.converters[m].name!r}")
            if abs(y[k, m] - model(m, k)) / (1.0 + abs(y[k, m])) > tight_tol:
                queue.append(m)

    # re-simulate isolated buffers whose inputs moved
    if touched_buffers:
        states = sorted({j for i in touched_buffers for j in absorbers[i][1]})
        for k in range(K):
            x[k + 1, states] = (p.A @ x[k] + p.B @ u[k] + p.f[k])[states]
        lo, hi = p.x_lo[:, states], p.x_hi[:, states]
        if np.any(x[:, states] < lo - feas_tol) or np.any(x[:, states] > hi + feas_tol):
            raise NoDissipativePath("re-simulated buffer leaves its state bounds")
    point = {"x": x, "u": u, "y": y, "s": s}
    viol = feasibility_violation(p, point)
    scale = 1.0 + max(np.abs(p.v).max(initial=0), np.abs(x).max(initial=0))
    if viol > 1e-6 * scale:
        raise NoDissipativePath(f"projected point violates the constraints by {viol:.3e}")
    return point, p.cost(u, y)


def feasibility_violation(p: NetworkProblem, point: dict) -> float:
    """Largest violation of the original constraints (equalities, bounds, slack signs)."""
    x, u, y, s = point["x"], point["u"], point["y"], point["s"]
    v = []
    v.append(np.abs(x[0] - p.x_init).max(initial=0))
    dyn = x[1:] - (x[:-1] @ p.A.T + u @ p.B.T + p.f)
    v.append(np.abs(dyn).max(initial=0))
    node = x[:-1] @ p.E.T + u @ p.F.T + y @ p.G.T + s - p.v
    v.append(np.abs(node).max(initial=0))
    v.append(np.abs(s[:, ~p.dissipative]).max(initial=0))
    v.append(np.maximum(-s, 0).max(initial=0))
    for m, conv in enumerate(p.converters):
        v.append(np.abs(y[:, m] - conv.output(x[:-1], u)).max(initial=0))
    v.append(np.maximum(p.x_lo - x, 0).max(initial=0))
    v.append(np.maximum(x - p.x_hi, 0).max(initial=0))
    v.append(np.maximum(p.u_lo - u, 0).max(initial=0))
    v.append(np.maximum(u - p.u_hi, 0).max(initial=0))
    return float(max(v))
