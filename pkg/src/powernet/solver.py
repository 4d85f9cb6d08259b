"""Primal-dual interior-point solver for linear + second-order cone programs.

Solves the program built by :mod:`powernet.transcription`

    minimize c'x   s.t.   A x = b,   G x + s = h,   s in K

together with its dual ``maximize -b'y - h'z  s.t.  A'y + G'z + c = 0, z in K``
through the homogeneous self-dual embedding, so that infeasible and unbounded
programs produce certificates instead of diverging iterates. Directions use
Nesterov-Todd scaling and a Mehrotra predictor-corrector; each iteration
factors one sparse quasi-definite KKT matrix with QDLDL.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .errors import NotSolved

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
MAX_ITER = "max_iter"
SOLVER_ERROR = "solver_error"  # external backend gave up


@dataclass(frozen=True)
class Settings:
    tol: float = 1e-8
    max_iter: int = 100
    step: float = 0.99  # fraction of the distance to the cone boundary
    reg: float = 1e-9  # static KKT regularization
    refine: int = 8  # iterative refinement sweeps
    equilibrate: int = 15  # Ruiz sweeps
    verbose: bool = False


# --------------------------------------------------------------------------
# cone algebra
# --------------------------------------------------------------------------


class Cones:
    """Index bookkeeping and Jordan algebra for ``R_+^l x Q^{q_1} x ...``.

    Second-order cones of equal size are grouped so that every operation is a
    handful of vectorized numpy calls regardless of the number of cones.
    """

    def __init__(self, dims: dict):
        self.l = int(dims.get("l", 0))
        self.q = [int(v) for v in dims.get("q", [])]
        if any(v < 1 for v in self.q):
            raise ValueError("second-order cone sizes must be positive")
        self.m = self.l + sum(self.q)
        self.degree = self.l + len(self.q)
        starts = self.l + np.concatenate([[0], np.cumsum(self.q)[:-1]]).astype(int) if self.q else []
        groups = {}
        for st, size in zip(starts, self.q):
            groups.setdefault(size, []).append(st)
        # size -> (N, size) index matrix
        self.groups = {
            size: np.asarray(sts, dtype=int)[:, None] + np.arange(size)[None, :]
            for size, sts in sorted(groups.items())
        }

    def identity(self):
        e = np.zeros(self.m)
        e[: self.l] = 1.0
        for idx in self.groups.values():
            e[idx[:, 0]] = 1.0
        return e

    def min_eig(self, v):
        """Smallest Jordan eigenvalue over all blocks (``inf`` for an empty cone)."""
        out = [np.min(v[: self.l])] if self.l else []
        for idx in self.groups.values():
            V = v[idx]
            out.append(np.min(V[:, 0] - np.linalg.norm(V[:, 1:], axis=1)))
        return min(out) if out else np.inf

    def strictly_inside(self, v) -> bool:
        """``v_0 > |v_1|`` in floating point, so that the block determinants stay positive."""
        if self.l and not np.all(v[: self.l] > 0):
            return False
        for idx in self.groups.values():
            V = v[idx]
            n1 = np.linalg.norm(V[:, 1:], axis=1)
            if not np.all(V[:, 0] - n1 > 0):
                return False
        return True

    def prod(self, u, v):
        w = np.empty(self.m)
        w[: self.l] = u[: self.l] * v[: self.l]
        for idx in self.groups.values():
            U, V = u[idx], v[idx]
            w[idx[:, 0]] = np.einsum("ij,ij->i", U, V)
            w[idx[:, 1:]] = U[:, :1] * V[:, 1:] + V[:, :1] * U[:, 1:]
        return w

    def div(self, lam, v):
        """``w`` with ``lam o w = v``."""
        w = np.empty(self.m)
        w[: self.l] = v[: self.l] / lam[: self.l]
        for idx in self.groups.values():
            L, V = lam[idx], v[idx]
            l0, l1 = L[:, 0], L[:, 1:]
            det = (l0 - np.linalg.norm(l1, axis=1)) * (l0 + np.linalg.norm(l1, axis=1))
            w0 = (l0 * V[:, 0] - np.einsum("ij,ij->i", l1, V[:, 1:])) / det
            w[idx[:, 0]] = w0
            w[idx[:, 1:]] = (V[:, 1:] - w0[:, None] * l1) / l0[:, None]
        return w

    def max_step(self, v, dv):
        """Largest ``alpha`` with ``v + alpha dv`` in the cone (``v`` interior)."""
        alpha = np.inf
        if self.l:
            neg = dv[: self.l] < 0
            if np.any(neg):
                alpha = min(alpha, np.min(-v[: self.l][neg] / dv[: self.l][neg]))
        for idx in self.groups.values():
            V, D = v[idx], dv[idx]
            nv1 = np.linalg.norm(V[:, 1:], axis=1)
            c = (V[:, 0] - nv1) * (V[:, 0] + nv1)
            b = 2.0 * (V[:, 0] * D[:, 0] - np.einsum("ij,ij->i", V[:, 1:], D[:, 1:]))
            a = D[:, 0] ** 2 - np.einsum("ij,ij->i", D[:, 1:], D[:, 1:])
            alpha = min(alpha, _smallest_positive_root(a, b, c))
            # leaving through the apex along the axis
            neg = D[:, 0] < 0
            if np.any(neg):
                alpha = min(alpha, np.min(-V[neg, 0] / D[neg, 0]))
        return alpha


def _smallest_positive_root(a, b, c):
    # smallest t > 0 with a t^2 + b t + c = 0, given c > 0; inf when none
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), np.abs(c))
    lin = np.abs(a) <= 1e-14 * scale
    t = np.full(a.shape, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        sel = lin & (b < 0)
        t[sel] = -c[sel] / b[sel]
        disc = b * b - 4.0 * a * c
        quad = ~lin & (disc >= 0)
        sq = np.sqrt(np.where(quad, disc, 0.0))
        q = -0.5 * (b + np.copysign(sq, b))
        r1 = np.where(quad, q / a, np.inf)
        r2 = np.where(quad & (q != 0), c / q, np.inf)
        for r in (r1, r2):
            ok = quad & (r > 0)
            t[ok] = np.minimum(t[ok], r[ok])
    return float(np.min(t)) if t.size else np.inf


class NTScaling:
    """Nesterov-Todd scaling ``W`` with ``W z = W^{-1} s = lambda``."""

    def __init__(self, cones: Cones, s, z):
        self.cones = cones
        l = cones.l
        self.d = np.sqrt(s[:l] / z[:l])
        self.eta = {}
        self.wbar = {}
        self.v = {}
        for size, idx in cones.groups.items():
            S, Z = s[idx], z[idx]
            ns, nz = np.linalg.norm(S[:, 1:], axis=1), np.linalg.norm(Z[:, 1:], axis=1)
            det_s = (S[:, 0] - ns) * (S[:, 0] + ns)
            det_z = (Z[:, 0] - nz) * (Z[:, 0] + nz)
            sb = S / np.sqrt(det_s)[:, None]
            zb = Z / np.sqrt(det_z)[:, None]
            gamma = np.sqrt(0.5 * (1.0 + np.einsum("ij,ij->i", sb, zb)))
            zb[:, 1:] *= -1.0
            wbar = (sb + zb) / (2.0 * gamma)[:, None]
            self.wbar[size] = wbar
            # W = eta Q_v with v the square root of wbar, so that W^2 = eta^2 Q_wbar
            v = wbar.copy()
            v[:, 0] += 1.0
            self.v[size] = v / np.sqrt(2.0 * (wbar[:, 0] + 1.0))[:, None]
            self.eta[size] = (det_s / det_z) ** 0.25

    def apply(self, v, inverse=False):
        out = np.empty_like(v)
        l = self.cones.l
        out[:l] = v[:l] / self.d if inverse else v[:l] * self.d
        for size, idx in self.cones.groups.items():
            w = self.v[size].copy()
            eta = self.eta[size]
            if inverse:
                w[:, 1:] *= -1.0
            V = v[idx]
            wv = np.einsum("ij,ij->i", w, V)
            R = 2.0 * wv[:, None] * w
            R[:, 0] -= V[:, 0]
            R[:, 1:] += V[:, 1:]
            out[idx] = R / eta[:, None] if inverse else R * eta[:, None]
        return out

    def squared_blocks(self):
        """Diagonal of ``W^2`` on the linear part and dense ``(N, q, q)`` blocks per cone size."""
        blocks = {}
        for size, w in self.wbar.items():
            Jd = np.ones(size)
            Jd[0] = -1.0  # -J
            M = 2.0 * w[:, :, None] * w[:, None, :]
            M[:, np.arange(size), np.arange(size)] += Jd
            blocks[size] = (self.eta[size] ** 2)[:, None, None] * M
        return self.d**2, blocks


# --------------------------------------------------------------------------
# KKT system
# --------------------------------------------------------------------------


class KKTSystem:
    """Quasi-definite system ``[[0, A', G'], [A, 0, 0], [G, 0, -W^2]]``.

    The factored matrix carries a small static regularization; iterative
    refinement against the unregularized operator recovers full accuracy.
    When refinement fails to converge (badly scaled ``W`` late in a solve)
    the system is refactored with a pivoted sparse LU.
    """

    def __init__(self, A, G, cones: Cones, reg: float, refine: int):
        import qdldl

        self._qdldl = qdldl
        self.A, self.G = A.tocsr(), G.tocsr()
        self.At, self.Gt = self.A.T.tocsr(), self.G.T.tocsr()
        self.cones = cones
        self.reg = reg
        self.refine = refine
        n, p, m = A.shape[1], A.shape[0], G.shape[0]
        self.n, self.p, self.m = n, p, m
        N = n + p + m
        # fixed sparsity pattern of the upper triangle; values are filled per iteration
        At = sp.coo_matrix(self.A.T)
        Gt = sp.coo_matrix(self.G.T)
        rows = [np.arange(n), At.row, Gt.row, n + np.arange(p)]
        cols = [np.arange(n), n + At.col, n + p + Gt.col, n + np.arange(p)]
        self._fixed = np.concatenate([np.full(n, reg), At.data, Gt.data, np.full(p, -reg)])
        off = n + p
        rows.append(off + np.arange(cones.l))
        cols.append(off + np.arange(cones.l))
        self._wsl = []
        for size, idx in cones.groups.items():
            iu, ju = np.triu_indices(size)
            r = (off + idx[:, iu]).ravel()
            c = (off + idx[:, ju]).ravel()
            rows.append(r)
            cols.append(c)
            self._wsl.append((size, iu, ju))
        rows = np.concatenate(rows).astype(np.int64)
        cols = np.concatenate(cols).astype(np.int64)
        ids = np.arange(rows.size, dtype=float) + 1.0
        K = sp.csc_matrix((ids, (rows, cols)), shape=(N, N))
        K.sort_indices()
        self._perm = K.data.astype(np.int64) - 1
        self._K = K
        self._values = np.empty(rows.size)
        self._values[: self._fixed.size] = self._fixed
        self._solver = None
        self._lu_cache = None
        self.W = None

    def factor(self, W: NTScaling, reg=None):
        self.W = W
        self._lu_cache = None
        reg = self.reg if reg is None else reg
        self._reg = reg
        n, p = self.n, self.p
        vals = self._values
        vals[:n] = reg
        vals[self._fixed.size - p: self._fixed.size] = -reg
        diag, blocks = W.squared_blocks()
        pos = self._fixed.size
        vals[pos: pos + diag.size] = -(diag + reg)
        pos += diag.size
        for size, iu, ju in self._wsl:
            B = blocks[size][:, iu, ju]
            B = -B
            B[:, iu == ju] -= reg
            vals[pos: pos + B.size] = B.ravel()
            pos += B.size
        self._K.data = vals[self._perm]
        try:
            if self._solver is None:
                self._solver = self._qdldl.Solver(self._K, upper=True)
            else:
                self._solver.update(self._K, upper=True)
        except RuntimeError:
            # zero pivot: retry with a stronger shift
            if reg >= 1e-3:
                raise
            self._solver = None
            self.factor(W, max(reg, 1e-12) * 100.0)

    def _matvec(self, v):
        n, p = self.n, self.p
        x, y, z = v[:n], v[n:n + p], v[n + p:]
        W = self.W
        out = np.empty_like(v)
        out[:n] = self.At @ y + self.Gt @ z
        out[n:n + p] = self.A @ x
        out[n + p:] = self.G @ x - W.apply(W.apply(z))
        return out

    def _refined(self, rhs, backsolve):
        sol = backsolve(rhs)
        bnorm = 1.0 + np.max(np.abs(rhs))
        err = np.inf
        for _ in range(self.refine + 1):
            r = rhs - self._matvec(sol)
            err = np.max(np.abs(r)) / bnorm
            if not np.isfinite(err):
                err = np.inf
                break
            if err <= 1e-14:
                break
            sol = sol + backsolve(r)
        return sol, err

    def _lu(self):
        # pivoted LU of the full symmetric matrix; slower, but stable where LDL' is not
        if self._lu_cache is None:
            from scipy.sparse.linalg import splu

            Ku = self._K
            full = (Ku + Ku.T - sp.diags(Ku.diagonal())).tocsc()
            self._lu_cache = splu(full)
        return self._lu_cache.solve

    def solve(self, rhs):
        sol, err = self._refined(rhs, self._solver.solve)
        if err <= 1e-12:
            return sol
        alt, err2 = self._refined(rhs, self._lu())
        return alt if err2 < err else sol


# --------------------------------------------------------------------------
# equilibration
# --------------------------------------------------------------------------


def _ruiz(A, G, cones: Cones, sweeps: int):
    """Diagonal scalings ``D`` (columns), ``EA``, ``EG`` (rows), one scalar per cone block."""
    n = A.shape[1]
    D = np.ones(n)
    EA = np.ones(A.shape[0])
    EG = np.ones(G.shape[0])
    A = A.tocsc(copy=True)
    G = G.tocsc(copy=True)

    def absmax_rows(M):
        M = abs(M.tocsr())
        return M.max(axis=1).toarray().ravel() if M.shape[1] else np.zeros(M.shape[0])

    def absmax_cols(M):
        M = abs(M.tocsc())
        return M.max(axis=0).toarray().ravel() if M.shape[0] else np.zeros(M.shape[1])

    for _ in range(sweeps):
        cn = np.maximum(absmax_cols(A), absmax_cols(G))
        dc = 1.0 / np.sqrt(np.where(cn > 0, cn, 1.0))
        ra = absmax_rows(A)
        da = 1.0 / np.sqrt(np.where(ra > 0, ra, 1.0))
        rg = absmax_rows(G)
        for idx in cones.groups.values():
            rg[idx] = np.max(rg[idx], axis=1, keepdims=True)
        dg = 1.0 / np.sqrt(np.where(rg > 0, rg, 1.0))
        dc, da, dg = (np.clip(v, 1e-4, 1e4) for v in (dc, da, dg))
        A = sp.diags(da) @ A @ sp.diags(dc)
        G = sp.diags(dg) @ G @ sp.diags(dc)
        D *= dc
        EA *= da
        EG *= dg
        if max(np.max(np.abs(1 - dc), initial=0), np.max(np.abs(1 - da), initial=0),
               np.max(np.abs(1 - dg), initial=0)) < 1e-3:
            break
    return A.tocsr(), G.tocsr(), D, EA, EG


# --------------------------------------------------------------------------
# solution
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Solution:
    """Primal-dual pair of a conic program.

    ``primal`` is the stacked decision vector, ``eq_dual`` the multipliers of
    ``A x = b`` and ``cone_dual`` those of ``G x + s = h`` (in the dual cone),
    with the sign convention ``c + A'eq_dual + G'cone_dual = 0``.
    """

    primal: np.ndarray
    eq_dual: np.ndarray
    cone_dual: np.ndarray
    slack: np.ndarray
    status: str
    pobj: float
    dobj: float
    primal_res: float
    dual_res: float
    rel_gap: float
    iterations: int
    wall_time: float
    backend: str = "ipm"
    cp: object = field(default=None, repr=False)

    @property
    def metrics(self) -> dict:
        return {
            "primal_res": self.primal_res,
            "dual_res": self.dual_res,
            "rel_gap": self.rel_gap,
            "iterations": self.iterations,
            "wall_time": self.wall_time,
        }

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL

    # ---- network views --------------------------------------------------
    def _layout(self):
        if self.cp is None or self.cp.layout is None:
            raise ValueError("solution is not attached to a network program")
        return self.cp.layout

    def trajectories(self):
        """``(x, u, y, s)`` arrays of shapes (K+1, n_x), (K, n_u), (K, M), (K, n_s)."""
        return self._layout().split(self.primal)

    def node_duals(self) -> np.ndarray:
        """Node multipliers ``lambda_k`` as a (K, J) array."""
        self._layout()
        return self.eq_dual[self.cp.node_rows]

    def dynamics_duals(self) -> np.ndarray:
        self._layout()
        return self.eq_dual[self.cp.dyn_rows]

    def output_reduced_costs(self) -> np.ndarray:
        """``b + G' lambda_k`` per step, recomputed from the node multipliers (K, M)."""
        p = self.cp.problem
        return p.b[None, :] + self.node_duals() @ p.G

    def cone_reduced_costs(self) -> np.ndarray:
        """The same quantity read off the converter cones: ``-(G_cone' z)`` on each output (K, M)."""
        lay = self._layout()
        p = self.cp.problem
        out = np.zeros((lay.K, p.M))
        Gc = self.cp.G.tocsc()
        for k in range(lay.K):
            for m in range(p.M):
                blk = self.cp.cones[k][m]
                col = lay.iy(k, m)
                lo, hi = Gc.indptr[col], Gc.indptr[col + 1]
                rows, vals = Gc.indices[lo:hi], Gc.data[lo:hi]
                sel = (rows >= blk.start) & (rows < blk.start + blk.size)
                out[k, m] = -float(vals[sel] @ self.cone_dual[rows[sel]])
        return out

    def multipliers(self) -> np.ndarray:
        """Converter multipliers ``mu_k`` of ``h_m <= 0`` (K, M).

        Read off the cone dual's pull on the converter output: ``mu = r / (-dh/dy)``
        with ``r`` the cone reduced cost, so that ``r + (dh/dy) mu = 0`` holds exactly
        and the stationarity residual measures agreement with the node multipliers.
        """
        lay = self._layout()
        p = self.cp.problem
        x, u, y, _ = self.trajectories()
        red = self.cone_reduced_costs()
        mu = np.zeros((lay.K, p.M))
        for m, conv in enumerate(p.converters):
            _, gy = conv.template.grad(conv.args(x[:-1], u), y[:, m])
            mu[:, m] = red[:, m] / -np.asarray(gy, dtype=float)
        return mu

    def cone_alignment(self) -> np.ndarray:
        """Sine of the angle between the cone dual's pull and ``grad h`` per converter (K, M).

        Zero when the cone normal and the converter gradient are parallel, as at
        an exact boundary point; grows like the square root of the complementarity
        gap for interior-point iterates.
        """
        lay = self._layout()
        p = self.cp.problem
        x, u, y, _ = self.trajectories()
        Gt = self.cp.G.T.tocsr()
        out = np.zeros((lay.K, p.M))
        for m, conv in enumerate(p.converters):
            for k in range(lay.K):
                blk = self.cp.cones[k][m]
                sl = slice(blk.start, blk.start + blk.size)
                cols = [lay.ix(k, i) if kind == "x" else lay.iu(k, i)
                        for kind, i in zip(conv.arg_kind, conv.arg_idx)] + [lay.iy(k, m)]
                pull = Gt[cols][:, sl] @ self.cone_dual[sl]
                gz, gy = conv.template.grad(conv.args(x[k], u[k]), y[k, m])
                g = np.concatenate([np.ravel(gz), [float(gy)]])
                npull, ng = np.linalg.norm(pull), np.linalg.norm(g)
                if npull > 0 and ng > 0:
                    cosv = abs(float(g @ pull)) / (npull * ng)
                    out[k, m] = np.sqrt(max(0.0, 1.0 - cosv * cosv))
        return out

    def to_json(self, path=None, include_vectors: bool = False) -> str:
        d = {
            "status": self.status,
            "backend": self.backend,
            "pobj": self.pobj,
            "dobj": self.dobj,
            **self.metrics,
        }
        if include_vectors:
            d.update(primal=self.primal.tolist(), eq_dual=self.eq_dual.tolist(),
                     cone_dual=self.cone_dual.tolist(), slack=self.slack.tolist())
        text = json.dumps(d, indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def residuals(cp, x, y, z, s):
    """Relative primal residual, dual residual and gap of an (unscaled) point."""
    rp_eq = cp.A @ x - cp.b if cp.n_eq else np.zeros(0)
    rp_in = cp.G @ x + s - cp.h if cp.n_ineq else np.zeros(0)
    rd = cp.c + (cp.A.T @ y if cp.n_eq else 0.0) + (cp.G.T @ z if cp.n_ineq else 0.0)
    inf = lambda v: float(np.max(np.abs(v))) if np.size(v) else 0.0  # noqa: E731
    pres = max(inf(rp_eq), inf(rp_in)) / (1.0 + max(inf(cp.b), inf(cp.h)))
    dres = inf(rd) / (1.0 + inf(cp.c))
    pobj = float(cp.c @ x)
    dobj = -float(cp.b @ y) - float(cp.h @ z)
    gap = abs(pobj - dobj) / (1.0 + abs(pobj))
    return pres, dres, gap, pobj, dobj


# --------------------------------------------------------------------------
# interior-point method
# --------------------------------------------------------------------------


def _ipm(cp, st: Settings) -> Solution:
    t0 = time.perf_counter()
    cones = Cones(cp.dims)
    if cones.m != cp.n_ineq:
        raise ValueError(f"cone dimensions sum to {cones.m}, program has {cp.n_ineq} inequality rows")
    n, p, m = cp.n, cp.n_eq, cp.n_ineq
    A0 = cp.A if p else sp.csr_matrix((0, n))
    G0 = cp.G if m else sp.csr_matrix((0, n))
    A, G, D, EA, EG = _ruiz(A0, G0, cones, st.equilibrate)
    c = D * cp.c
    b = EA * cp.b
    h = EG * cp.h
    kkt = KKTSystem(A, G, cones, st.reg, st.refine)
    e = cones.identity()

    def unscale(x, y, z, s, tau=1.0):
        return D * x / tau, EA * y / tau, EG * z / tau, s / EG / tau

    # initial point: least-norm primal / dual solutions shifted into the cone
    ones = NTScaling(cones, e, e)
    kkt.factor(ones)
    sol = kkt.solve(np.concatenate([np.zeros(n), b, h]))
    x = sol[:n]
    s = -sol[n + p:]
    a_p = -cones.min_eig(s) if m else -1.0
    if a_p >= -1e-8:
        s = s + (1.0 + max(a_p, 0.0)) * e
    sol = kkt.solve(np.concatenate([-c, np.zeros(p), np.zeros(m)]))
    y = sol[n:n + p]
    z = sol[n + p:]
    a_d = -cones.min_eig(z) if m else -1.0
    if a_d >= -1e-8:
        z = z + (1.0 + max(a_d, 0.0)) * e
    tau, kappa = 1.0, 1.0

    status = MAX_ITER
    best = None
    it = 0
    for it in range(st.max_iter + 1):
        # residuals of the embedding
        r1 = A.T @ y + G.T @ z + c * tau
        r2 = A @ x - b * tau
        r3 = s + G @ x - h * tau
        r4 = kappa + c @ x + b @ y + h @ z

        xu, yu, zu, su = unscale(x, y, z, s, tau)
        pres, dres, gap, pobj, dobj = residuals(cp, xu, yu, zu, su)
        score = max(pres, dres, gap)
        if best is None or score < best[0]:
            best = (score, (xu, yu, zu, su, pobj, dobj, pres, dres, gap))
        if st.verbose:
            print(f"{it:3d} pobj={pobj:+.8e} dobj={dobj:+.8e} pres={pres:.1e} "
                  f"dres={dres:.1e} gap={gap:.1e} tau={tau:.1e} kap={kappa:.1e}")
        if pres <= st.tol and dres <= st.tol and gap <= st.tol:
            status = OPTIMAL
            break
        # certificates (scale-free: tau dropped)
        xc, yc, zc, sc = unscale(x, y, z, s)
        bz = float(cp.b @ yc + cp.h @ zc)
        if bz < 0:
            res = np.max(np.abs(cp.A.T @ yc + cp.G.T @ zc)) if (p or m) else 0.0
            if res / (-bz) <= st.tol and kappa > tau * 1e-3:
                status = INFEASIBLE
                best = (0.0, (xc, yc / -bz, zc / -bz, sc, np.nan, -1.0, np.nan, np.nan, np.nan))
                break
        cx = float(cp.c @ xc)
        if cx < 0:
            res = max(np.max(np.abs(cp.A @ xc), initial=0.0),
                      np.max(np.abs(cp.G @ xc + sc), initial=0.0))
            if res / (-cx) <= st.tol and kappa > tau * 1e-3:
                status = UNBOUNDED
                best = (0.0, (xc / -cx, yc, zc, sc / -cx, -1.0, np.nan, np.nan, np.nan, np.nan))
                break
        if it == st.max_iter:
            break

        W = NTScaling(cones, s, z)
        lam = W.apply(z)
        mu = (s @ z + tau * kappa) / (cones.degree + 1)
        try:
            kkt.factor(W)
        except Exception:  # pragma: no cover - numerical breakdown
            break
        d1 = kkt.solve(np.concatenate([-c, b, h]))
        x1, y1, z1 = d1[:n], d1[n:n + p], d1[n + p:]
        den = c @ x1 + b @ y1 + h @ z1 - kappa / tau

        def direction(sigma, ds_rhs, k_rhs):
            bx = -(1.0 - sigma) * r1
            by = -(1.0 - sigma) * r2
            bzv = -(1.0 - sigma) * r3 - W.apply(cones.div(lam, ds_rhs))
            d2 = kkt.solve(np.concatenate([bx, by, bzv]))
            x2, y2, z2 = d2[:n], d2[n:n + p], d2[n + p:]
            dtau = (-(1.0 - sigma) * r4 - k_rhs / tau - (c @ x2 + b @ y2 + h @ z2)) / den
            dx = x2 + dtau * x1
            dy = y2 + dtau * y1
            dz = z2 + dtau * z1
            ds = W.apply(cones.div(lam, ds_rhs)) - W.apply(W.apply(dz))
            dkappa = (k_rhs - kappa * dtau) / tau
            return dx, dy, dz, ds, dtau, dkappa

        def steplen(dz, ds, dtau, dkappa):
            a = min(cones.max_step(s, ds), cones.max_step(z, dz))
            if dtau < 0:
                a = min(a, -tau / dtau)
            if dkappa < 0:
                a = min(a, -kappa / dkappa)
            return a

        # predictor
        aff = direction(0.0, -cones.prod(lam, lam), -tau * kappa)
        a_aff = min(1.0, steplen(aff[2], aff[3], aff[4], aff[5]))
        sigma = float(np.clip((1.0 - a_aff) ** 3, 0.0, 1.0))
        # corrector
        ds_a = W.apply(aff[3], inverse=True)
        dz_a = W.apply(aff[2])
        ds_rhs = -cones.prod(lam, lam) + sigma * mu * e - cones.prod(ds_a, dz_a)
        k_rhs = -tau * kappa + sigma * mu - aff[4] * aff[5]
        dx, dy, dz, ds, dtau, dkappa = direction(sigma, ds_rhs, k_rhs)
        if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dz)) and np.isfinite(dtau)):
            break
        alpha = min(1.0, st.step * steplen(dz, ds, dtau, dkappa))
        if st.verbose:
            print(f"    alpha={alpha:.2e} sigma={sigma:.1e} mu={mu:.1e}")
        if not np.isfinite(alpha) or alpha <= 0:
            break
        # rounding in the boundary distance can land a block on the cone surface
        for _ in range(40):
            if cones.strictly_inside(s + alpha * ds) and cones.strictly_inside(z + alpha * dz):
                break
            alpha *= 0.8
        x = x + alpha * dx
        y = y + alpha * dy
        z = z + alpha * dz
        s = s + alpha * ds
        tau = tau + alpha * dtau
        kappa = kappa + alpha * dkappa
        if alpha < 1e-10:
            break

    xu, yu, zu, su, pobj, dobj, pres, dres, gap = best[1]
    return Solution(
        primal=xu, eq_dual=yu, cone_dual=zu, slack=su, status=status, pobj=pobj, dobj=dobj,
        primal_res=pres, dual_res=dres, rel_gap=gap, iterations=it,
        wall_time=time.perf_counter() - t0, backend="ipm", cp=cp,
    )


# --------------------------------------------------------------------------
# external backend
# --------------------------------------------------------------------------


def _cvxpy_solve(cp, st: Settings, solver_name: str) -> Solution:
    import cvxpy as cvx

    t0 = time.perf_counter()
    x = cvx.Variable(cp.n)
    cons = []
    if cp.n_eq:
        eq = cp.A @ x == cp.b
        cons.append(eq)
    cones = Cones(cp.dims)
    slack = cp.h - cp.G @ x
    lin = None
    if cones.l:
        lin = slack[: cones.l] >= 0
        cons.append(lin)
    socs = []
    for idx in cones.groups.values():
        for row in idx:
            con = cvx.SOC(slack[row[0]], slack[row[1:]])
            socs.append((row, con))
            cons.append(con)
    prob = cvx.Problem(cvx.Minimize(cp.c @ x), cons)
    try:
        kw = {}
        if solver_name == "SCS":
            # first-order method: tighten its defaults to cross-validation accuracy
            kw = {"eps_abs": 0.1 * st.tol, "eps_rel": 0.1 * st.tol, "max_iters": 1_000_000}
        elif solver_name == "CVXOPT":
            kw = {"kktsolver": "robust"}
        prob.solve(solver=solver_name, **kw)
        stat = {"optimal": OPTIMAL, "infeasible": INFEASIBLE, "unbounded": UNBOUNDED}.get(
            prob.status, MAX_ITER)
    except cvx.error.SolverError:
        stat = SOLVER_ERROR
    if stat != OPTIMAL:
        nan = np.full(cp.n, np.nan)
        return Solution(nan, np.full(cp.n_eq, np.nan), np.full(cp.n_ineq, np.nan),
                        np.full(cp.n_ineq, np.nan), stat, np.nan, np.nan, np.nan, np.nan,
                        np.nan, 0, time.perf_counter() - t0, backend=solver_name.lower(), cp=cp)
    xv = np.asarray(x.value, dtype=float)
    z = np.zeros(cp.n_ineq)
    if lin is not None:
        z[: cones.l] = np.asarray(lin.dual_value, dtype=float).ravel()
    for row, con in socs:
        dv = con.dual_value
        z[row[0]] = float(np.ravel(dv[0])[0])
        z[row[1:]] = np.ravel(dv[1])
    y = np.zeros(cp.n_eq)
    if cp.n_eq:
        y = np.asarray(eq.dual_value, dtype=float).ravel()
        # cvxpy's sign convention for equality duals is the opposite of ours
        r_plus = np.abs(cp.c + cp.A.T @ y + cp.G.T @ z).max()
        r_minus = np.abs(cp.c - cp.A.T @ y + cp.G.T @ z).max()
        if r_minus < r_plus:
            y = -y
    s = cp.h - cp.G @ xv
    pres, dres, gap, pobj, dobj = residuals(cp, xv, y, z, s)
    return Solution(xv, y, z, s, OPTIMAL, pobj, dobj, pres, dres, gap, 0,
                    time.perf_counter() - t0, backend=solver_name.lower(), cp=cp)


# --------------------------------------------------------------------------
# public entry points
# --------------------------------------------------------------------------


def solve(cp, tol: float = 1e-8, max_iter: int = 100, backend: str = "ipm", **opts) -> Solution:
    """Solve a conic program.

    Parameters
    ----------
    cp : ConicProgram
    tol : float
        Relative tolerance on primal residual, dual residual and duality gap.
    max_iter : int
    backend : str
        ``"ipm"`` (built-in) or the name of a cvxpy conic solver such as
        ``"CLARABEL"`` for cross-validation.

    Returns
    -------
    Solution
        ``status`` is ``optimal``, ``infeasible`` (the duals form a Farkas
        certificate), ``unbounded`` (the primal is a recession direction) or
        ``max_iter`` (best iterate found).
    """
    st = Settings(tol=tol, max_iter=max_iter, **opts)
    if backend.lower() == "ipm":
        return _ipm(cp, st)
    return _cvxpy_solve(cp, st, backend.upper())


def kkt_report(cp, sol: Solution) -> dict:
    """Stationarity and complementarity of the converter constraints at an optimum.

    The stationarity residual is ``|b + G'lambda_k + (dh/dy) mu_k|`` with
    ``lambda`` the node multipliers and ``mu`` the converter multipliers taken
    from the cone duals; the complementarity figure is ``max |mu_k h_k|``.
    ``alignment`` is the largest sine between cone pull and ``grad h``.
    """
    if sol.status != OPTIMAL:
        raise NotSolved(f"solution status is {sol.status!r}")
    if cp.layout is None or cp.problem is None:
        raise ValueError("kkt_report needs a program built from a network")
    p = cp.problem
    sol = sol if sol.cp is cp else replace(sol, cp=cp)
    x, u, y, _ = sol.trajectories()
    red = sol.output_reduced_costs()
    mu = sol.multipliers()
    dhdy = np.zeros_like(mu)
    hval = np.zeros_like(mu)
    for m, conv in enumerate(p.converters):
        args = conv.args(x[:-1], u)
        _, gy = conv.template.grad(args, y[:, m])
        dhdy[:, m] = gy
        hval[:, m] = conv.template.value(args, y[:, m])
    stat = red + dhdy * mu
    comp = mu * hval
    return {
        "stationarity": float(np.max(np.abs(stat))) if stat.size else 0.0,
        "stationarity_per_step": np.max(np.abs(stat), axis=1) if stat.size else np.zeros(0),
        "complementarity": float(np.max(np.abs(comp))) if comp.size else 0.0,
        "min_reduced_cost": float(np.min(red)) if red.size else 0.0,
        "alignment": float(np.max(sol.cone_alignment())) if red.size else 0.0,
        "primal_res": sol.primal_res,
        "dual_res": sol.dual_res,
        "rel_gap": sol.rel_gap,
    }
