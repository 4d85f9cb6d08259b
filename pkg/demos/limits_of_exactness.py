"""Three small networks that show what the relaxation can and cannot promise.

1. Two branches feed dissipative nodes and only one output is priced. The
   relaxation leaves the unpriced output above its model value; one round of
   output regularization moves it onto the manifold without changing the cost.
2. A converter pinned to a storage state through a conservative node has no
   feasible point at all; the relaxation still finds one, and no round of
   regularization or projection can repair it.
3. A one-step random network that meets every structural requirement, yet the
   node multiplier comes out negative and a slack output acts as dissipation.
   The relaxation undercuts the true optimum, found here by a dense scan.

    python demos/limits_of_exactness.py
"""
import numpy as np

from powernet import scenarios as sc
from powernet.errors import NoDissipativePath, NotExactified
from powernet.exactness import audit, feasible_projection, solve_exact
from powernet.oracle import enumerate_toy
from powernet.solver import solve
from powernet.transcription import build_relaxation


def two_branch():
    p = sc.toy_two_branch()
    rep = audit(solve(build_relaxation(p)))
    print(f"relaxed cost {rep.cost:.9f}, slack converters: "
          f"{[c for c in ('branch1', 'branch2') if rep.slack_steps(c).size]}")
    sol, rep = solve_exact(p)
    _, u, y, _ = sol.trajectories()
    print(f"after {len(rep.trace)} round(s): cost {rep.cost:.9f}, u={u[0].round(6)}, "
          f"y={y[0].round(6)}, exact={rep.all_tight}")
    print(f"grid enumeration (81 points per input): {enumerate_toy(p, 81).value:.9f}")


def pinned_storage():
    p = sc.toy_conservative_slack()
    sol = solve(build_relaxation(p, force=True))
    _, u, y, _ = sol.trajectories()
    uc = u[0, p.converters[0].own_u[0]]
    print(f"relaxation: u={uc:.4f}, y={y[0, 0]:.4f} but y=u^2 needs {uc ** 2:.4f}")
    try:
        solve_exact(p, force=True, max_rounds=3)
    except NotExactified as e:
        print(f"regularization: {e}")
    try:
        feasible_projection(sol)
    except NoDissipativePath as e:
        print(f"projection: {e}")


def scan(p, n=2001):
    # grid two inputs, solve the single node balance for the third
    F, G, v = p.F[0], p.G[0], p.v[0, 0]
    owner = {int(c.own_u[0]): m for m, c in enumerate(p.converters)}
    piv = next(i for i in range(p.n_u) if F[i] != 0 and G[owner[i]] == 0)
    rest = [i for i in range(p.n_u) if i != piv]
    U = np.zeros((n, n, p.n_u))
    U[..., rest[0]] = np.linspace(p.u_lo[0, rest[0]], p.u_hi[0, rest[0]], n)[:, None]
    U[..., rest[1]] = np.linspace(p.u_lo[0, rest[1]], p.u_hi[0, rest[1]], n)[None, :]
    Y = np.zeros((n, n, p.M))

    def out(i):
        return p.converters[owner[i]].template.output(U[..., [i]].reshape(-1, 1)).reshape(n, n)

    for i in rest:
        Y[..., owner[i]] = out(i)
    U[..., piv] = (v - U[..., rest] @ F[rest] - Y @ G) / F[piv]
    Y[..., owner[piv]] = out(piv)
    ok = (U[..., piv] >= p.u_lo[0, piv]) & (U[..., piv] <= p.u_hi[0, piv])
    return float((U @ p.a + Y @ p.b)[ok].min())


def negative_multiplier():
    p = sc.random_network(np.random.default_rng(51), K=1, n_buffers=0, n_converters=3,
                          n_nodes=1)
    sol = solve(build_relaxation(p))
    rep = audit(sol)
    print(f"requirements pass; node is {'dissipative' if p.dissipative[0] else 'conservative'}, "
          f"multiplier {sol.node_duals()[0, 0]:.4f}")
    print(f"relaxed cost {rep.cost:.6f}, slack converters "
          f"{[c.name for m, c in enumerate(p.converters) if rep.slack_steps(c.name).size]}")
    print(f"dense scan of the original problem (grid, so slightly high): {scan(p):.6f}")
    _, upper = feasible_projection(sol)
    print(f"projected feasible point costs {upper:.6f}")


if __name__ == "__main__":
    for title, fn in (("two branches", two_branch), ("pinned storage", pinned_storage),
                      ("negative node multiplier", negative_multiplier)):
        print(f"--- {title}")
        fn()
