"""Relaxed convex program of a network in conic standard form.

The program is

    minimize    c' z
    subject to  A z = b
                G z + s = h,   s in K = R_+^l x Q^{q_1} x ... x Q^{q_r}

where ``Q^n = {(s0, s1) : s0 >= ||s1||}`` is the Lorenz cone. Every
converter equality ``h_m = 0`` is relaxed to ``h_m <= 0``; the polynomial and
hyperbolic templates become 3- (or n-) dimensional Lorenz cones through the
rotated-cone identity ``4 p q >= w^2  <=>  ||(w, p - q)|| <= p + q``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

import numpy as np
import scipy.sparse as sp

from .errors import NotRelaxable, RequirementUnmet
from .network import Hyperbolic, Linear, NetworkProblem, Quadratic, ScaledSquare

CHOLESKY_SHIFT = 1e-12


@dataclass(frozen=True)
class ConeBlock:
    """One relaxed converter instance: rows of G/h and the template that produced it."""

    kind: str  # "soc" or "lin"
    start: int  # first inequality row
    size: int


@dataclass(frozen=True)
class Layout:
    """Index map of the stacked decision vector ``z = [x_0..x_K, u, y, s]``."""

    K: int
    n_x: int
    n_u: int
    M: int
    diss: np.ndarray  # indices of dissipative nodes

    @property
    def n_s(self) -> int:
        return self.diss.size

    @property
    def x0(self) -> int:
        return 0

    @property
    def u0(self) -> int:
        return (self.K + 1) * self.n_x

    @property
    def y0(self) -> int:
        return self.u0 + self.K * self.n_u

    @property
    def s0(self) -> int:
        return self.y0 + self.K * self.M

    @property
    def n(self) -> int:
        return self.s0 + self.K * self.n_s

    def ix(self, k, i=None):
        base = self.x0 + k * self.n_x
        return base + (np.arange(self.n_x) if i is None else i)

    def iu(self, k, i=None):
        base = self.u0 + k * self.n_u
        return base + (np.arange(self.n_u) if i is None else i)

    def iy(self, k, m=None):
        base = self.y0 + k * self.M
        return base + (np.arange(self.M) if m is None else m)

    def is_(self, k, j=None):
        base = self.s0 + k * self.n_s
        return base + (np.arange(self.n_s) if j is None else j)

    def split(self, z):
        """``(x (K+1, n_x), u (K, n_u), y (K, M), s (K, n_s))`` views of a stacked vector."""
        z = np.asarray(z)
        K = self.K
        return (
            z[self.x0:self.u0].reshape(K + 1, self.n_x),
            z[self.u0:self.y0].reshape(K, self.n_u),
            z[self.y0:self.s0].reshape(K, self.M),
            z[self.s0:self.n].reshape(K, self.n_s),
        )


@dataclass(frozen=True, eq=False)
class ConicProgram:
    c: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    G: sp.csr_matrix
    h: np.ndarray
    dims: dict  # {"l": int, "q": [int, ...]}
    layout: Layout | None = None
    problem: NetworkProblem | None = None
    base_c: np.ndarray | None = None  # cost before regularization
    cones: tuple = ()  # (K, M) nested tuple of ConeBlock
    dyn_rows: np.ndarray | None = None  # (K+1, n_x) equality rows
    node_rows: np.ndarray | None = None  # (K, J) equality rows
    bound_rows: dict = field(default_factory=dict)  # name -> (rows, var indices, sign)
    regularization: dict = field(default_factory=dict)  # y index -> sigma

    @property
    def n(self) -> int:
        return self.c.size

    @property
    def n_eq(self) -> int:
        return self.b.size

    @property
    def n_ineq(self) -> int:
        return self.h.size

    def base_cost(self, z) -> float:
        c = self.c if self.base_c is None else self.base_c
        return float(c @ np.asarray(z))


# --------------------------------------------------------------------------
# converter encodings
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ConeConstraint:
    """``s = h - G_loc [z; y] in cone`` over the converter arguments ``z`` and output ``y``.

    ``G_loc`` has one column per template argument plus a last column for ``y``.
    ``kind`` is ``"soc"`` (Lorenz cone) or ``"lin"`` (single nonnegative row).
    """

    kind: str
    G_loc: np.ndarray
    h: np.ndarray

    def slack(self, z, y):
        xi = np.concatenate([np.atleast_1d(np.asarray(z, dtype=float)), [float(y)]])
        return self.h - self.G_loc @ xi

    def contains(self, z, y, tol=0.0) -> bool:
        s = self.slack(z, y)
        if self.kind == "lin":
            return bool(s[0] >= -tol)
        return bool(s[0] - np.linalg.norm(s[1:]) >= -tol)


def relax_converter(template) -> ConeConstraint:
    """Convex encoding of ``h <= 0`` for one converter template."""
    if isinstance(template, Linear):
        # a'z + beta - y <= 0   ->   s = -beta - (a'z - y) >= 0
        return ConeConstraint("lin", np.concatenate([template.a, [-1.0]])[None, :],
                              np.array([-template.beta]))
    if isinstance(template, ScaledSquare):
        c, d = template.c, template.d
        if c < 0:
            raise NotRelaxable("ScaledSquare with negative curvature")
        # t = y - d u >= c u^2  <=>  ||(sqrt(2c) u, t - 1/2)|| <= t + 1/2
        G = -np.array([
            [-d, 1.0],
            [np.sqrt(2.0 * c), 0.0],
            [-d, 1.0],
        ])
        return ConeConstraint("soc", G, np.array([0.5, 0.0, -0.5]))
    if isinstance(template, Hyperbolic):
        e = template.eps
        # y (u + e) >= 1  <=>  ||(2, y - u - e)|| <= y + u + e
        G = -np.array([
            [1.0, 1.0],
            [0.0, 0.0],
            [-1.0, 1.0],
        ])
        return ConeConstraint("soc", G, np.array([e, 2.0, -e]))
    if isinstance(template, Quadratic):
        if not template.output_is_linear:
            raise NotRelaxable("output enters the quadratic form; no conic relaxation")
        ay = template.a[-1]
        if ay >= 0:
            raise NotRelaxable("dh/dy must be negative for a conic relaxation")
        n = template.n_inputs
        Qz = template.Q[:n, :n]
        w = np.linalg.eigvalsh(Qz) if n else np.zeros(0)
        if n and w.min() < -1e-10 * max(1.0, np.abs(w).max()):
            raise NotRelaxable("indefinite quadratic form")
        if n and np.all(np.abs(Qz) == 0.0):
            L = np.zeros((n, 0))
        elif n:
            L = np.linalg.cholesky(Qz + CHOLESKY_SHIFT * np.eye(n))
        else:
            L = np.zeros((0, 0))
        if L.shape[1] == 0:
            # purely linear in z
            return ConeConstraint("lin", np.concatenate([template.a[:n], [ay]])[None, :],
                                  np.array([-template.beta]))
        # t = -(a_z'z + beta + a_y y) >= 0.5 ||L'z||^2  <=>  ||(L'z, t - 1/2)|| <= t + 1/2
        az = template.a[:n]
        t_row = np.concatenate([-az, [-ay]])  # t = t_row . [z; y] - beta
        rows = [t_row, *np.hstack([L.T, np.zeros((L.shape[1], 1))]), t_row]
        G = -np.array(rows)
        h = np.concatenate([[0.5 - template.beta], np.zeros(L.shape[1]), [-0.5 - template.beta]])
        return ConeConstraint("soc", G, h)
    raise NotRelaxable(f"no relaxation for template {type(template).__name__}")


# --------------------------------------------------------------------------
# relaxation
# --------------------------------------------------------------------------


def build_relaxation(p: NetworkProblem, force: bool = False, check: bool = True) -> ConicProgram:
    """Relaxed program: cost, relaxed converters, nodes, dynamics, bounds.

    With ``check`` the structural requirements are verified first and a failure
    raises RequirementUnmet unless ``force`` is set.
    """
    if check and not force:
        from .checker import check_requirements

        report = check_requirements(p)
        if not report.passed:
            raise RequirementUnmet(f"requirements not met: {report.failed_names()}", report)

    K, n_x, n_u, M, J = p.K, p.n_x, p.n_u, p.M, p.J
    diss = np.flatnonzero(p.dissipative)
    lay = Layout(K=K, n_x=n_x, n_u=n_u, M=M, diss=diss)
    n = lay.n

    c = np.zeros(n)
    for k in range(K):
        c[lay.iu(k)] = p.a
        c[lay.iy(k)] = p.b

    # equality rows: dynamics (Gamma form) then nodes
    rows, cols, vals = [], [], []
    b = []
    dyn_rows = np.zeros((K + 1, n_x), dtype=int)
    r = 0
    for i in range(n_x):
        rows.append(r); cols.append(lay.ix(0, i)); vals.append(1.0)
        b.append(p.x_init[i]); dyn_rows[0, i] = r; r += 1
    Ai, Aj = np.nonzero(p.A)
    Bi, Bj = np.nonzero(p.B)
    for k in range(K):
        for i in range(n_x):
            rows.append(r); cols.append(lay.ix(k + 1, i)); vals.append(1.0)
            sel = Ai == i
            for jj in Aj[sel]:
                rows.append(r); cols.append(lay.ix(k, jj)); vals.append(-p.A[i, jj])
            sel = Bi == i
            for jj in Bj[sel]:
                rows.append(r); cols.append(lay.iu(k, jj)); vals.append(-p.B[i, jj])
            b.append(p.f[k, i]); dyn_rows[k + 1, i] = r; r += 1
    node_rows = np.zeros((K, J), dtype=int)
    Ei, Ej = np.nonzero(p.E)
    Fi, Fj = np.nonzero(p.F)
    Gi, Gj = np.nonzero(p.G)
    diss_pos = {int(j): t for t, j in enumerate(diss)}
    for k in range(K):
        for j in range(J):
            for jj in Ej[Ei == j]:
                rows.append(r); cols.append(lay.ix(k, jj)); vals.append(p.E[j, jj])
            for jj in Fj[Fi == j]:
                rows.append(r); cols.append(lay.iu(k, jj)); vals.append(p.F[j, jj])
            for jj in Gj[Gi == j]:
                rows.append(r); cols.append(lay.iy(k, jj)); vals.append(p.G[j, jj])
            if j in diss_pos:
                rows.append(r); cols.append(lay.is_(k, diss_pos[j])); vals.append(1.0)
            b.append(p.v[k, j]); node_rows[k, j] = r; r += 1

    # inequalities: nonnegative rows first (bounds, slacks, linear converters), then cones
    g_rows, g_cols, g_vals, h = [], [], [], []
    bound_rows = {}
    fixed = []

    def add_bounds(name, idx, lo, hi):
        idx = np.asarray(idx).ravel()
        lo = np.asarray(lo, dtype=float).ravel()
        hi = np.asarray(hi, dtype=float).ravel()
        out_rows, out_idx, out_sign = [], [], []
        for var, l, u in zip(idx, lo, hi):
            if l == u:
                # a pinned variable is an equality; two opposite rows would leave no interior
                rows.append(len(b)); cols.append(var); vals.append(1.0); b.append(l)
                fixed.append(int(var))
                continue
            if np.isfinite(l):
                # -z <= -l
                rr = len(h)
                g_rows.append(rr); g_cols.append(var); g_vals.append(-1.0); h.append(-l)
                out_rows.append(rr); out_idx.append(var); out_sign.append(-1.0)
            if np.isfinite(u):
                rr = len(h)
                g_rows.append(rr); g_cols.append(var); g_vals.append(1.0); h.append(u)
                out_rows.append(rr); out_idx.append(var); out_sign.append(1.0)
        bound_rows[name] = (np.array(out_rows, dtype=int), np.array(out_idx, dtype=int),
                            np.array(out_sign))

    add_bounds("x", [lay.ix(k) for k in range(K + 1)], p.x_lo, p.x_hi)
    add_bounds("u", [lay.iu(k) for k in range(K)], p.u_lo, p.u_hi)
    if lay.n_s:
        add_bounds("s", [lay.is_(k) for k in range(K)], np.zeros((K, lay.n_s)),
                   np.full((K, lay.n_s), np.inf))
    bound_rows["fixed"] = np.array(fixed, dtype=int)
    A = sp.csr_matrix((vals, (rows, cols)), shape=(len(b), n))

    encodings = [relax_converter(conv.template) for conv in p.converters]
    cones = [[None] * M for _ in range(K)]

    def arg_columns(m, k):
        conv = p.converters[m]
        cols_ = [lay.ix(k, i) if kind == "x" else lay.iu(k, i)
                 for kind, i in zip(conv.arg_kind, conv.arg_idx)]
        return cols_ + [lay.iy(k, m)]

    def emit(enc, k, m):
        start = len(h)
        colsk = arg_columns(m, k)
        for rr in range(enc.G_loc.shape[0]):
            for cc, val in enumerate(enc.G_loc[rr]):
                if val != 0.0:
                    g_rows.append(start + rr); g_cols.append(colsk[cc]); g_vals.append(val)
            h.append(enc.h[rr])
        cones[k][m] = ConeBlock(enc.kind, start, enc.G_loc.shape[0])

    for k in range(K):
        for m, enc in enumerate(encodings):
            if enc.kind == "lin":
                emit(enc, k, m)
    n_lin = len(h)
    q_dims = []
    for k in range(K):
        for m, enc in enumerate(encodings):
            if enc.kind == "soc":
                emit(enc, k, m)
                q_dims.append(enc.G_loc.shape[0])
    G = sp.csr_matrix((g_vals, (g_rows, g_cols)), shape=(len(h), n))
    return ConicProgram(
        c=c, A=A, b=np.array(b, dtype=float), G=G, h=np.array(h, dtype=float),
        dims={"l": n_lin, "q": q_dims}, layout=lay, problem=p, base_c=c.copy(),
        cones=tuple(tuple(row) for row in cones), dyn_rows=dyn_rows, node_rows=node_rows,
        bound_rows=bound_rows,
    )


def add_regularization(cp: ConicProgram, outputs: Iterable[int] | Mapping[int, float],
                       sigma: float | None = None) -> ConicProgram:
    """Add ``sigma * y`` to the cost for the selected output variables.

    ``outputs`` holds stacked variable indices (use :func:`output_indices`), or a
    mapping index -> weight. The base cost used for drift checks is unchanged.
    """
    if cp.layout is None:
        raise ValueError("regularization needs a program built from a network")
    lay = cp.layout
    weights = dict(outputs) if isinstance(outputs, Mapping) else {int(i): sigma for i in outputs}
    c = cp.c.copy()
    reg = dict(cp.regularization)
    for idx, w in weights.items():
        if w is None or w < 0:
            raise ValueError("regularization weight must be non-negative")
        if not lay.y0 <= idx < lay.s0:
            raise ValueError(f"index {idx} is not a converter output")
        if w == 0:
            continue
        c[idx] += w
        reg[idx] = reg.get(idx, 0.0) + w
    return replace(cp, c=c, regularization=reg)


def output_indices(cp: ConicProgram, converters: Iterable[str | int], steps=None) -> list[int]:
    """Stacked indices of the outputs of the named converters over ``steps`` (default all)."""
    lay, p = cp.layout, cp.problem
    steps = range(lay.K) if steps is None else steps
    out = []
    for conv in converters:
        m = p.converter_index(conv) if isinstance(conv, str) else int(conv)
        out.extend(int(lay.iy(k, m)) for k in steps)
    return out


# --------------------------------------------------------------------------
# text dump
# --------------------------------------------------------------------------

_MAGIC = "CONICPROGRAM 1"


def _write_vec(fh, tag, v):
    nz = np.flatnonzero(v)
    fh.write(f"{tag} {nz.size}\n")
    for i in nz:
        fh.write(f"{i} {float(v[i])!r}\n")


def _write_mat(fh, tag, M):
    M = sp.coo_matrix(M)
    fh.write(f"{tag} {M.nnz}\n")
    order = np.lexsort((M.col, M.row))
    for i, j, val in zip(M.row[order], M.col[order], M.data[order]):
        fh.write(f"{i} {j} {float(val)!r}\n")


def dump_program(cp: ConicProgram, path) -> None:
    """Write the program as a plain-text triplet file.

    Layout::

        CONICPROGRAM 1
        SIZES <n> <n_eq> <n_ineq>
        CONES <l> <r> <q_1> ... <q_r>
        C <nnz>      followed by "<i> <value>" lines
        B <nnz>
        H <nnz>
        A <nnz>      followed by "<row> <col> <value>" lines
        G <nnz>
        END
    """
    with open(path, "w") as fh:
        fh.write(_MAGIC + "\n")
        fh.write(f"SIZES {cp.n} {cp.n_eq} {cp.n_ineq}\n")
        q = cp.dims["q"]
        fh.write("CONES " + " ".join(str(v) for v in [cp.dims["l"], len(q), *q]) + "\n")
        _write_vec(fh, "C", cp.c)
        _write_vec(fh, "B", cp.b)
        _write_vec(fh, "H", cp.h)
        _write_mat(fh, "A", cp.A)
        _write_mat(fh, "G", cp.G)
        fh.write("END\n")


def load_program(path) -> ConicProgram:
    """Read a program written by :func:`dump_program` (no network metadata)."""
    with open(path) as fh:
        lines = iter(fh.read().split("\n"))
    if next(lines).strip() != _MAGIC:
        raise ValueError("not a conic program dump")
    _, n, p, m = next(lines).split()
    n, p, m = int(n), int(p), int(m)
    cone = [int(t) for t in next(lines).split()[1:]]
    dims = {"l": cone[0], "q": cone[2:2 + cone[1]]}

    def read_vec(tag, size):
        head = next(lines).split()
        if head[0] != tag:
            raise ValueError(f"expected section {tag}, got {head[0]}")
        v = np.zeros(size)
        for _ in range(int(head[1])):
            i, val = next(lines).split()
            v[int(i)] = float(val)
        return v

    def read_mat(tag, shape):
        head = next(lines).split()
        if head[0] != tag:
            raise ValueError(f"expected section {tag}, got {head[0]}")
        nnz = int(head[1])
        ri, ci, vv = np.zeros(nnz, int), np.zeros(nnz, int), np.zeros(nnz)
        for t in range(nnz):
            i, j, val = next(lines).split()
            ri[t], ci[t], vv[t] = int(i), int(j), float(val)
        return sp.csr_matrix((vv, (ri, ci)), shape=shape)

    c = read_vec("C", n)
    b = read_vec("B", p)
    h = read_vec("H", m)
    A = read_mat("A", (p, n))
    G = read_mat("G", (m, n))
    if next(lines).strip() != "END":
        raise ValueError("missing END marker")
    return ConicProgram(c=c, A=A, b=b, G=G, h=h, dims=dims)
