"""Acceptance gates.

Each test checks one criterion at its stated tolerance and records a
``PASS``/``FAIL`` line; the lines are printed as they are produced and again
in the terminal summary. Run on its own with ``python tests/test_acceptance.py``.
"""
import time
from dataclasses import replace

import numpy as np
import pytest

from powernet import scenarios as sc
from powernet.checker import FAIL, check_licq, check_requirements, numerical_rank, stacked_xi
from powernet.exactness import audit, solve_exact
from powernet.oracle import GridSpec, dp_solve
from powernet.solver import OPTIMAL, solve
from powernet.transcription import build_relaxation

from helpers import TEMPLATES, boundary_coincidence, cvem_small, eco_small, reference_solve
from socp import random_socp

RESULTS = {}


def record(cid, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] C{cid} {title}: {detail}"
    RESULTS[cid] = line
    print(line)
    return ok


def relative_gap(value, ref):
    return abs(ref - value) / abs(value)


@pytest.fixture(scope="module")
def study():
    """The three eco-driving study cases at full scale, with solve times."""
    out = {}
    for case in (1, 2, 3):
        p, reg = sc.eco_case(case)
        t0 = time.perf_counter()
        if case == 3:
            sol, rep = solve_exact(p, regularize=reg, max_rounds=0)
        else:
            sol = solve(build_relaxation(p))
            rep = audit(sol) if sol.status == OPTIMAL else None
        out[case] = (p, sol, rep, time.perf_counter() - t0)
    return out


def test_c1_eco_case_one(study):
    p, sol, rep, secs = study[1]
    worst = rep.max_residual() if rep is not None else np.inf
    ok = p.K == 2500 and sol.status == OPTIMAL and worst <= 1e-3 and secs <= 30.0
    assert record(1, "eco-driving case 1 at K=2500", ok,
                  f"status={sol.status}, max residual={worst:.2e} (<= 1e-3), "
                  f"time={secs:.1f}s (<= 30s)")


def test_c2_regularization(study):
    _, _, rep1, _ = study[1]
    _, _, rep2, _ = study[2]
    _, _, rep3, _ = study[3]
    r1, r2, r3 = (r.max_residual("leth") for r in (rep1, rep2, rep3))
    growth, reduction = r2 / r1, r2 / r3
    drift = abs(rep3.cost - rep2.cost) / abs(rep2.cost)
    ok = growth >= 10 and reduction >= 10 and drift <= 1e-3
    assert record(2, "regularization efficacy", ok,
                  f"case2/case1 leth residual={growth:.3g} (>= 10), "
                  f"case2/case3={reduction:.3g} (>= 10), cost change={drift:.2e} (<= 1e-3)")


def test_c3_dynamic_programming_oracle():
    t0 = time.perf_counter()
    runs = {
        "eco K=20": (eco_small(), [(51, 50), (101, 50), (201, 50)]),
        "cvem K=10": (cvem_small(), [(51,), (101,), (201,)]),
    }
    ok, parts = True, []
    for name, (p, grids) in runs.items():
        ref = solve_exact(p)[1].cost
        gaps = [relative_gap(dp_solve(p, GridSpec(g)).value, ref) for g in grids]
        mono = all(a > b for a, b in zip(gaps, gaps[1:]))
        ok &= mono and gaps[-1] <= 0.02
        parts.append(f"{name} gaps " + "/".join(f"{g:.2e}" for g in gaps))
    secs = time.perf_counter() - t0
    ok &= secs <= 60.0
    assert record(3, "dynamic-programming oracle", ok,
                  "; ".join(parts) + f" (finest <= 2e-2, decreasing), time={secs:.1f}s (<= 60s)")


def test_c4_full_row_rank():
    n_inst = n_pts = n_full = 0
    for seed in range(20):
        p = sc.random_network(np.random.default_rng(seed), K=1 + seed % 10)
        if not check_licq(p, clip=10.0).passed:
            continue
        n_inst += 1
        rng = np.random.default_rng(1000 + seed)
        # feasible points of the relaxation: optima under random bounded costs
        for _ in range(10):
            q = replace(p, a=rng.uniform(-1, 1, p.n_u), b=rng.uniform(0.1, 1, p.M))
            sol = solve(build_relaxation(q))
            if sol.status != OPTIMAL:
                continue
            x, u, y, _ = sol.trajectories()
            Xi = stacked_xi(p, x, u, y)
            n_pts += 1
            n_full += numerical_rank(Xi, 1e-8) == Xi.shape[0]
    boundary = {}
    for lo in (0.5, 1e-2, 1e-4, 0.0):
        st = check_requirements(eco_small(K=5, bounds=sc.EcoBounds(kin_input_min=lo)))
        boundary[lo] = st.statuses["v_rank"]
    pos_ok = all(boundary[lo].state != FAIL for lo in (0.5, 1e-2, 1e-4))
    zero = boundary[0.0]
    zero_ok = zero.state == FAIL and zero.witness["u"]["v"] == 0.0
    ok = n_inst > 0 and n_pts == 10 * n_inst and n_full == n_pts and pos_ok and zero_ok
    assert record(4, "stacked constraint Jacobian rank", ok,
                  f"{n_full}/{n_pts} full-rank points on {n_inst} instances; "
                  f"u_v,lo>0 pass={pos_ok}, u_v,lo=0 fail with u_v=0 witness={zero_ok}")


def test_c5_solver_correctness():
    worst = {"gap": 0.0, "pres": 0.0, "dres": 0.0, "obj": 0.0}
    n_ok, n_ref, backends = 0, 0, set()
    for seed in range(100):
        cp = random_socp(np.random.default_rng(seed), n_max=200)
        sol = solve(cp)
        ref = reference_solve(cp)
        worst["gap"] = max(worst["gap"], sol.rel_gap)
        worst["pres"] = max(worst["pres"], sol.primal_res)
        worst["dres"] = max(worst["dres"], sol.dual_res)
        good = sol.status == OPTIMAL and max(sol.rel_gap, sol.primal_res, sol.dual_res) <= 1e-8
        if ref.status == OPTIMAL:
            n_ref += 1
            backends.add(ref.backend)
            dev = abs(sol.pobj - ref.pobj) / (1 + abs(ref.pobj))
            worst["obj"] = max(worst["obj"], dev)
            good &= dev <= 1e-6
        n_ok += good
    ok = n_ok == 100 and n_ref == 100
    assert record(5, "solver correctness on 100 random SOCPs", ok,
                  f"{n_ok}/100 ok, worst gap={worst['gap']:.1e} pres={worst['pres']:.1e} "
                  f"dres={worst['dres']:.1e} (<= 1e-8), objective vs "
                  f"{'/'.join(sorted(backends))} {worst['obj']:.1e} (<= 1e-6) on {n_ref} refs")


def sign_violations(sol):
    rep = audit(sol, tight_tol=1e-5)
    red = rep.reduced_cost
    neg = int(np.sum(red < -1e-7))
    loose = int(np.sum((red > 1e-5) & (rep.residual > 1e-5)))
    return neg, loose, float(red.min(initial=0.0))


def test_c6_sign_property(study):
    corpus = [study[c][1] for c in (1, 2, 3)]
    hill = {"start": 100.0, "end": 400.0, "grade": 0.04}
    for p in (eco_small(), cvem_small(), eco_small(K=200, T_max=60.0, hill=hill),
              eco_small(K=200, T_max=1e5, hill=hill), sc.toy_two_branch()):
        corpus.append(solve(build_relaxation(p)))
    for seed in range(30):
        p = sc.random_network(np.random.default_rng(seed), K=1 + seed % 6)
        corpus.append(solve(build_relaxation(p)))
    optimal = [s for s in corpus if s.status == OPTIMAL]
    neg = loose = 0
    low = 0.0
    for sol in optimal:
        a, b, m = sign_violations(sol)
        neg, loose, low = neg + a, loose + b, min(low, m)
    ok = len(optimal) == len(corpus) and neg == 0 and loose == 0
    assert record(6, "reduced-cost sign and tightness", ok,
                  f"{len(optimal)}/{len(corpus)} optimal solves, min b+G'lambda={low:.1e} "
                  f"(>= -1e-7), {neg} negative, {loose} priced-but-slack")


def test_c7_encoding_soundness():
    parts, ok = [], True
    for name in sorted(TEMPLATES):
        tmpl, box = TEMPLATES[name]
        err, bad = boundary_coincidence(tmpl, np.random.default_rng(11), n=10_000, box=box)
        ok &= err <= 1e-12 and bad == 0
        parts.append(f"{name} {err:.1e}/{bad}")
    assert record(7, "cone boundary equals converter manifold", ok,
                  "max margin/mismatches: " + ", ".join(parts) + " (<= 1e-12 / 0)")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))
