"""Series-hybrid energy management: relaxation against dynamic programming.

A ten-second demand cycle is served by an engine and an electric machine
sharing a battery that must end where it started. The convex relaxation is
solved once; dynamic programming on finer and finer battery grids
approaches its value from above, which is what an exact relaxation predicts.

    python demos/hybrid_vs_dp.py
"""
import time

import numpy as np

from powernet import scenarios as sc
from powernet.oracle import GridSpec, dp_solve
from powernet.exactness import solve_exact

CYCLE = np.array([5, 20, 35, 10, 0, 25, 40, 15, 8, 30]) * 1e3  # W


def main():
    p = sc.build_cvem(sc.CvemParams(v_p=CYCLE))
    t0 = time.perf_counter()
    sol, rep = solve_exact(p)
    print(f"relaxation: fuel {rep.cost:.6f} kJ (1 s steps), exact={rep.all_tight}, "
          f"max residual {rep.max_residual():.1e}, {sol.iterations} iterations, "
          f"{time.perf_counter() - t0:.2f} s")
    x, u, y, _ = sol.trajectories()
    print(f"battery [kJ]: {np.array2string(x[:, 0], precision=1)}")

    print(f"\n{'grid':>6} {'DP value':>12} {'rel. gap':>10} {'time [s]':>9}")
    for n in (26, 51, 101, 201, 401):
        t0 = time.perf_counter()
        r = dp_solve(p, GridSpec((n,)))
        gap = (r.value - rep.cost) / abs(r.value)
        print(f"{n:>6} {r.value:12.6f} {gap:10.2e} {time.perf_counter() - t0:9.2f}")


if __name__ == "__main__":
    main()
