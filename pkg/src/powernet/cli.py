"""Command-line front end.

Subcommands
-----------
run      check, relax, solve, audit and regularize one scenario; write CSV/JSON
check    evaluate the structural requirements and print the report
oracle   compare the relaxation with dynamic programming on a small scenario
solve    solve a dumped conic program and print the solution as JSON
dump     write the relaxation of a scenario as a sparse text dump

Exit codes: 0 exact optimum, 10 inexact optimum (report written),
20 requirement failure, 30 solver failure. Schema violations exit with 2.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import jsonschema
import numpy as np

from . import scenarios as sc
from .checker import check_requirements
from .errors import NotExactified, NotSolved, PowerNetError, RequirementUnmet, ScenarioError
from .exactness import audit, solve_exact
from .network import (
    CONSERVATIVE, Buffer, Converter, Hyperbolic, Linear, Node, PowerNetwork,
    Quadratic, ScaledSquare,
)
from .oracle import GridSpec, dp_solve
from .solver import OPTIMAL, solve
from .transcription import add_regularization, build_relaxation, dump_program, load_program

EXIT_OK, EXIT_INEXACT, EXIT_REQUIREMENT, EXIT_SOLVER, EXIT_SCHEMA = 0, 10, 20, 30, 2
SCHEMA_VERSION = 1
CASE_T_MAX = {1: 700.0, 2: 1e5, 3: 1e5}

_UNITS = {"units": {"const": "SI"}}
_NUM = {"type": "number"}
_VEC = {"type": "array", "items": _NUM}


def _block(props=None, required=(), extra=True):
    return {"type": "object", "required": ["units", *required],
            "properties": {**_UNITS, **(props or {})}, "additionalProperties": extra}


SCENARIO_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "powernet scenario",
    "type": "object",
    "required": ["schema_version", "type", "units"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "type": {"enum": ["eco_driving", "cvem", "custom"]},
        "units": {"const": "SI"},
        "name": {"type": "string"},
        "horizon": {"type": "integer", "minimum": 1},
        "T_max": {"type": "number", "exclusiveMinimum": 0},
        "v_init": _NUM,
        "vehicle": _block({k: _NUM for k in ("m", "m_e", "c_g", "c_r", "g", "delta_s")},
                          extra=False),
        "bounds": _block(),
        "route": {
            "type": "object", "required": ["units"],
            "properties": {
                **_UNITS,
                "file": {"type": "string"},
                "synth": {"type": "object", "required": ["length"],
                          "properties": {"length": _NUM, "hill": {"type": "object"},
                                         "descent": {"type": "boolean"}, "ramp": _NUM}},
            },
            "oneOf": [{"required": ["file"]}, {"required": ["synth"]}],
        },
        "params": _block({"v_p": _VEC}, required=["v_p"]),
        "network": _block({"buffers": {"type": "array"}, "converters": {"type": "array"},
                           "nodes": {"type": "array", "minItems": 1}},
                          required=["converters", "nodes"]),
        "solver": {"type": "object", "properties": {
            "tol": {"type": "number", "exclusiveMinimum": 0},
            "max_iter": {"type": "integer", "minimum": 1},
            "backend": {"type": "string"}}, "additionalProperties": False},
        "regularization": {"type": "object", "properties": {
            "sigma0": {"type": "number", "minimum": 0},
            "max_rounds": {"type": "integer", "minimum": 0},
            "tight_tol": {"type": "number", "exclusiveMinimum": 0},
            "converters": {"type": "object", "additionalProperties": {"type": "number"}}},
            "additionalProperties": False},
    },
    "allOf": [
        {"if": {"properties": {"type": {"const": "eco_driving"}}},
         "then": {"required": ["vehicle", "route", "T_max"]}},
        {"if": {"properties": {"type": {"const": "cvem"}}}, "then": {"required": ["params"]}},
        {"if": {"properties": {"type": {"const": "custom"}}}, "then": {"required": ["network"]}},
    ],
}


# --------------------------------------------------------------------------
# scenario ingestion
# --------------------------------------------------------------------------


def load_scenario(path) -> dict:
    """Read and validate a scenario file; raises ScenarioError on schema violations."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    try:
        jsonschema.validate(doc, SCENARIO_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ScenarioError(f"{path}: {where}: {exc.message}") from exc
    doc["_dir"] = str(path.parent)
    return doc


def _strip(d):
    return {k: v for k, v in (d or {}).items() if k != "units"}


def _template(spec):
    kind = spec.get("kind")
    if kind == "scaled_square":
        return ScaledSquare(float(spec["c"]), float(spec.get("d", 0.0)))
    if kind == "hyperbolic":
        return Hyperbolic(float(spec.get("eps", 0.0)))
    if kind == "linear":
        return Linear(spec["a"], float(spec.get("beta", 0.0)))
    if kind == "quadratic":
        return Quadratic(np.asarray(spec["Q"], float), spec["a"], float(spec.get("beta", 0.0)))
    if kind == "poly":
        return Quadratic.from_poly(*spec["coef"])
    raise ScenarioError(f"unknown converter template kind {kind!r}")


def build_custom(net_doc: dict, horizon: int) -> "sc.NetworkProblem":
    """Network from raw declarations.

    Node rows refer to variables by name: ``{"state": buffer}``,
    ``{"input": buffer_or_converter}`` (optional ``"i"``) or ``{"output": converter}``.
    """
    net = PowerNetwork()
    bufs, convs = {}, {}
    for b in net_doc.get("buffers", []):
        kw = {k: b[k] for k in ("A", "B", "x_init", "x_lo", "x_hi", "u_lo", "u_hi") if k in b}
        for k in ("f", "xK_lo", "xK_hi", "cost_a"):
            if k in b:
                kw[k] = b[k]
        bufs[b["name"]] = net.add_buffer(Buffer(name=b["name"], **kw))
    for c in net_doc["converters"]:
        kw = {k: c[k] for k in ("u_lo", "u_hi", "cost_a", "cost_b") if k in c}
        if "buffer" in c:
            kw["buffer"] = bufs[c["buffer"]]
        if "inputs" in c:
            kw["inputs"] = [tuple(a) for a in c["inputs"]]
        convs[c["name"]] = net.add_converter(Converter(_template(c["template"]), name=c["name"],
                                                       **kw))

    def index(term):
        if "state" in term:
            return "e", net.state(bufs[term["state"]], term.get("i", 0))
        if "output" in term:
            return "g", net.output(convs[term["output"]])
        if "input" in term:
            name = term["input"]
            if name in bufs:
                return "f", net.buffer_input(bufs[name], term.get("i", 0))
            return "f", net.converter_input(convs[name], term.get("i", 0))
        raise ScenarioError(f"node term {term} names no variable")

    for nd in net_doc["nodes"]:
        rows = {"e": {}, "f": {}, "g": {}}
        for term in nd["terms"]:
            which, idx = index(term)
            rows[which][idx] = rows[which].get(idx, 0.0) + float(term["coef"])
        net.add_node(Node(**rows, kind=nd.get("kind", CONSERVATIVE), load=nd.get("load", 0.0),
                          name=nd.get("name", "")))
    return net.assemble(horizon, meta={"scenario": "custom"})


def build_problem(doc: dict, case: int | None = None):
    """Problem and default regularization weights of a validated scenario."""
    kind = doc["type"]
    reg = dict(doc.get("regularization", {}).get("converters", {}))
    if case is not None and kind != "eco_driving":
        raise ScenarioError("--case applies to eco-driving scenarios only")
    if kind == "eco_driving":
        veh = sc.load_vehicle(doc["vehicle"])
        r = doc["route"]
        if "file" in r:
            route = sc.Route.from_csv(Path(doc["_dir"]) / r["file"], delta_s=veh.delta_s)
        else:
            syn = r["synth"]
            route = sc.synth_route(syn["length"], hill=syn.get("hill"), delta_s=veh.delta_s,
                                   descent=syn.get("descent", True), ramp=syn.get("ramp", 200.0))
        if "horizon" in doc:
            K = doc["horizon"]
            if K > route.n_samples:
                raise ScenarioError("horizon longer than the route")
            route = sc.Route(K * route.delta_s, route.grade[:K], route.delta_s)
        bounds = sc.EcoBounds(**_strip(doc.get("bounds")))
        T_max = CASE_T_MAX[case] if case else doc["T_max"]
        p = sc.build_eco_driving(veh, route, T_max=T_max, v_init=doc.get("v_init", 15.0),
                                 bounds=bounds)
    elif kind == "cvem":
        prm = _strip(doc["params"])
        if "coef" in prm:
            prm["coef"] = {k: tuple(v) for k, v in prm["coef"].items()}
        v_p = np.asarray(prm.pop("v_p"), float)
        if "horizon" in doc:
            v_p = v_p[: doc["horizon"]]
        p = sc.build_cvem(sc.CvemParams(v_p=v_p, **prm))
    else:
        net_doc = doc["network"]
        p = build_custom(net_doc, doc.get("horizon", net_doc.get("horizon", 1)))
    return p, reg


# --------------------------------------------------------------------------
# artifacts
# --------------------------------------------------------------------------


def _fmt(v) -> str:
    return repr(float(v))


def write_trajectory_csv(path, p, sol, report):
    """Eco-driving: k, s, v, F_p, residual_kin, residual_leth (SI). Otherwise every variable."""
    x, u, y, _ = sol.trajectories()
    res = report.residual
    lines = []
    if p.meta.get("scenario") == "eco_driving":
        ds = p.meta["vehicle"]["delta_s"]
        iv, iem = p.u_names.index("v"), p.u_names.index("em")
        mv, ml = p.converter_index("v"), p.converter_index("leth")
        lines.append("k,s,v,F_p,residual_kin,residual_leth")
        for k in range(p.K):
            # velocity from the kinetic converter's input, force back to newtons
            lines.append(",".join([str(k), _fmt(k * ds), _fmt(u[k, iv]), _fmt(u[k, iem] * 1e3),
                                   _fmt(res[k, mv]), _fmt(res[k, ml])]))
    else:
        cols = ([f"x_{n}" for n in p.x_names] + [f"u_{n}" for n in p.u_names]
                + [f"y_{n}" for n in p.y_names] + [f"residual_{n}" for n in p.y_names])
        lines.append(",".join(["k", *cols]))
        for k in range(p.K):
            vals = [*x[k], *u[k], *y[k], *res[k]]
            lines.append(",".join([str(k), *(_fmt(v) for v in vals)]))
    Path(path).write_text("\n".join(lines) + "\n")


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _solver_summary(sol):
    return {"status": sol.status, "backend": sol.backend, "pobj": sol.pobj, "dobj": sol.dobj,
            "primal_res": sol.primal_res, "dual_res": sol.dual_res, "gap": sol.rel_gap,
            "iterations": sol.iterations}


def _residual_stats(rep):
    return {n: {"max": float(rep.residual[:, m].max()), "mean": float(rep.residual[:, m].mean()),
                "slack_steps": int(np.sum(~rep.tight[:, m]))}
            for m, n in enumerate(rep.names)}


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def run_scenario(path, out_dir, case=None, sigma=None, tight_tol=None, quiet=False) -> int:
    """The full pipeline on one scenario file; returns the exit code."""
    t0 = time.perf_counter()
    doc = load_scenario(path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sv = doc.get("solver", {})
    rg = doc.get("regularization", {})
    tol, max_iter, backend = sv.get("tol", 1e-8), sv.get("max_iter", 100), sv.get("backend", "ipm")
    tight_tol = tight_tol or rg.get("tight_tol", 1e-5)
    p, reg = build_problem(doc, case)
    timings = {}
    summary = {"scenario": doc.get("name", Path(path).stem), "type": doc["type"], "K": p.K,
               "case": case}

    t = time.perf_counter()
    req = check_requirements(p)
    timings["check"] = time.perf_counter() - t
    summary["requirements"] = req.to_dict()
    if not req.passed:
        summary["exit_code"] = EXIT_REQUIREMENT
        _dump_json(out / "summary.json", summary)
        _say(quiet, req.summary())
        return EXIT_REQUIREMENT

    t = time.perf_counter()
    cp = build_relaxation(p, check=False)
    timings["transcribe"] = time.perf_counter() - t
    try:
        t = time.perf_counter()
        if case is not None:
            # the study cases: fixed regularization, no automatic rounds
            weights = {}
            if case == 3:
                sig = 0.01 if sigma is None else sigma
                reg = {"leth": sig}
                summary["sigma"] = sig
                base = solve(cp, tol=tol, max_iter=max_iter, backend=backend)
                if base.status != OPTIMAL:
                    raise NotSolved(f"solver stopped with status {base.status!r}")
                base_rep = audit(base, p, tight_tol)
            for name, sig in reg.items():
                m = p.converter_index(name)
                weights.update({int(cp.layout.iy(k, m)): float(sig) for k in range(p.K)})
            prog = add_regularization(cp, weights) if weights else cp
            sol = solve(prog, tol=tol, max_iter=max_iter, backend=backend)
            if sol.status != OPTIMAL:
                raise NotSolved(f"solver stopped with status {sol.status!r}")
            rep = audit(sol, p, tight_tol)
            if case == 3:
                before, after = base_rep.max_residual("leth"), rep.max_residual("leth")
                summary["unregularized_cost"] = base_rep.cost
                summary["cost_drift"] = abs(rep.cost - base_rep.cost) / max(1.0, abs(base_rep.cost))
                summary["residual_reduction"] = {"leth": before / after if after > 0 else float("inf"),
                                                 "before": before, "after": after}
        else:
            try:
                sol, rep = solve_exact(p, sigma0=rg.get("sigma0", 0.01) if sigma is None else sigma,
                                       max_rounds=rg.get("max_rounds", 5), tight_tol=tight_tol,
                                       tol=tol, max_iter=max_iter, backend=backend,
                                       regularize=reg, cp=cp)
            except NotExactified as exc:
                sol, rep = exc.solution, exc.report
        timings["solve"] = time.perf_counter() - t
    except NotSolved as exc:
        summary["exit_code"] = EXIT_SOLVER
        summary["error"] = str(exc)
        _dump_json(out / "summary.json", summary)
        _say(quiet, f"solver failure: {exc}")
        return EXIT_SOLVER

    code = EXIT_OK if rep.all_tight else EXIT_INEXACT
    summary.update({
        "cost": rep.cost,
        "solver": _solver_summary(sol),
        "exact": rep.all_tight,
        "flagged": [n for m, n in enumerate(rep.names) if not rep.tight[:, m].all()],
        "anomalous": len(rep.anomalous),
        "residuals": _residual_stats(rep),
        "rounds": rep.trace,
        "exit_code": code,
    })
    write_trajectory_csv(out / "trajectory.csv", p, sol, rep)
    rep.to_csv(out / "residuals.csv")
    _dump_json(out / "summary.json", summary)
    timings["total"] = time.perf_counter() - t0
    _dump_json(out / "timings.json", timings)
    _say(quiet, _run_text(summary))
    return code


def _run_text(s):
    lines = [f"{s['scenario']}: cost {s['cost']:.6g}, gap {s['solver']['gap']:.2e}, "
             f"{'exact' if s['exact'] else 'INEXACT'}"]
    for n, r in s["residuals"].items():
        flag = "  <- slack" if n in s["flagged"] else ""
        lines.append(f"  {n:>12s}  max residual {r['max']:.3e}{flag}")
    if "residual_reduction" in s:
        lines.append(f"  leth residual reduced {s['residual_reduction']['leth']:.1f}x "
                     f"(cost drift {s['cost_drift']:.2e})")
    return "\n".join(lines)


def _say(quiet, text):
    if not quiet:
        print(text)


def _cmd_run(args) -> int:
    files = args.scenario
    if len(files) > 1 and not args.batch:
        raise ScenarioError("several scenarios need --batch")
    if len(files) == 1:
        return run_scenario(files[0], args.out, args.case, args.sigma, args.tight_tol)
    jobs = [(f, str(Path(args.out) / Path(f).stem), args.case, args.sigma, args.tight_tol, False)
            for f in files]
    with ProcessPoolExecutor(max_workers=args.jobs) as pool:
        codes = list(pool.map(_run_job, jobs))
    for f, c in zip(files, codes):
        print(f"{f}: exit {c}")
    return max(codes)


def _run_job(job):
    try:
        return run_scenario(*job)
    except RequirementUnmet:
        return EXIT_REQUIREMENT
    except ScenarioError:
        return EXIT_SCHEMA


def _cmd_check(args) -> int:
    doc = load_scenario(args.scenario)
    p, _ = build_problem(doc)
    kw = {"n": args.samples}
    rep = check_requirements(p, **kw)
    print(rep.to_json() if args.json else rep.summary())
    return EXIT_OK if rep.passed else EXIT_REQUIREMENT


def _cmd_oracle(args) -> int:
    doc = load_scenario(args.scenario)
    p, reg = build_problem(doc)
    try:
        sol, rep = solve_exact(p, regularize=reg)
    except RequirementUnmet as exc:
        print(exc)
        return EXIT_REQUIREMENT
    except NotSolved as exc:
        print(f"solver failure: {exc}")
        return EXIT_SOLVER
    rows = []
    for n in args.grid:
        counts = (n, args.time_bins) if p.meta.get("scenario") == "eco_driving" else (n,)
        t = time.perf_counter()
        r = dp_solve(p, GridSpec(counts, interpolation=args.interpolation))
        rows.append({"grid": list(r.grid_sizes), "dp_value": r.value, "relaxation": rep.cost,
                     "rel_gap": (r.value - rep.cost) / abs(r.value) if np.isfinite(r.value)
                     else float("inf"), "seconds": time.perf_counter() - t})
    if args.json:
        print(json.dumps({"relaxation": rep.cost, "rows": [{k: v for k, v in r.items()
                                                             if k != "seconds"} for r in rows]},
                         indent=2, sort_keys=True))
    else:
        print(f"{'grid':>12s} {'DP value':>14s} {'relaxation':>14s} {'rel gap':>10s} {'s':>7s}")
        for r in rows:
            g = "x".join(str(c) for c in r["grid"])
            print(f"{g:>12s} {r['dp_value']:14.6f} {r['relaxation']:14.6f} "
                  f"{r['rel_gap']:10.2e} {r['seconds']:7.2f}")
    return EXIT_OK


def _cmd_solve(args) -> int:
    cp = load_program(args.program)
    sol = solve(cp, tol=args.tol, max_iter=args.max_iter, backend=args.backend)
    d = _solver_summary(sol)
    if args.vectors:
        d.update(primal=sol.primal.tolist(), eq_dual=sol.eq_dual.tolist(),
                 cone_dual=sol.cone_dual.tolist(), slack=sol.slack.tolist())
    text = json.dumps(d, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK if sol.status == OPTIMAL else EXIT_SOLVER


def _cmd_dump(args) -> int:
    doc = load_scenario(args.scenario)
    p, _ = build_problem(doc, args.case)
    dump_program(build_relaxation(p, force=args.force), args.out)
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="powernet", description=__doc__.split("\n")[0])
    ap.add_argument("--seed", type=int, help="seed for requirement sampling (sets POWERNET_SEED)")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="solve a scenario and write trajectories and reports")
    r.add_argument("scenario", nargs="+")
    r.add_argument("--out", default="out", help="output directory")
    r.add_argument("--case", type=int, choices=(1, 2, 3), help="eco-driving study case")
    r.add_argument("--sigma", type=float, help="regularization weight")
    r.add_argument("--tight-tol", type=float, help="residual below which a converter is tight")
    r.add_argument("--batch", action="store_true", help="run several scenarios concurrently")
    r.add_argument("--jobs", type=int, default=None)
    r.set_defaults(func=_cmd_run)

    c = sub.add_parser("check", help="evaluate the structural requirements")
    c.add_argument("scenario")
    c.add_argument("--samples", type=int, default=512)
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=_cmd_check)

    o = sub.add_parser("oracle", help="dynamic programming versus the relaxation")
    o.add_argument("scenario")
    o.add_argument("--grid", type=int, nargs="+", default=[51, 101, 201])
    o.add_argument("--time-bins", type=int, default=50)
    o.add_argument("--interpolation", choices=("nearest", "linear"), default="nearest")
    o.add_argument("--json", action="store_true")
    o.set_defaults(func=_cmd_oracle)

    s = sub.add_parser("solve", help="solve a dumped conic program")
    s.add_argument("program")
    s.add_argument("--tol", type=float, default=1e-8)
    s.add_argument("--max-iter", type=int, default=100)
    s.add_argument("--backend", default="ipm")
    s.add_argument("--vectors", action="store_true", help="include primal and dual vectors")
    s.add_argument("--out")
    s.set_defaults(func=_cmd_solve)

    d = sub.add_parser("dump", help="write the relaxation as a sparse text dump")
    d.add_argument("scenario")
    d.add_argument("out")
    d.add_argument("--case", type=int, choices=(1, 2, 3))
    d.add_argument("--force", action="store_true", help="skip the requirement check")
    d.set_defaults(func=_cmd_dump)
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    if args.seed is not None:
        os.environ["POWERNET_SEED"] = str(args.seed)
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except RequirementUnmet as exc:
        print(f"requirement failure: {exc}", file=sys.stderr)
        return EXIT_REQUIREMENT
    except NotSolved as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except PowerNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA


if __name__ == "__main__":
    sys.exit(main())
