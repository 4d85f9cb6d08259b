"""Power networks of buffers, converters and nodes.

A network is declared component by component on a :class:`PowerNetwork`
builder and frozen into a :class:`NetworkProblem` by :meth:`PowerNetwork.assemble`.
The assembled problem is the canonical optimal control problem

    min   sum_k  a' u_k + b' y_k
    s.t.  h_m(x_mk, u_mk, y_mk) = 0                  (converters)
          x_{k+1} = A x_k + B u_k + f_k              (buffers)
          E x_k + F u_k + G y_k + s_k = v_k          (nodes, s_k >= 0)
          x_lo <= x_k <= x_hi,  u_lo <= u_k <= u_hi

Every converter template is stored so that dh/dy < 0 on its admissible box:
``h = model(z) - y`` for the polynomial templates and ``h = 1 - y (u + eps)``
for the hyperbolic one.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import (
    DimensionMismatch,
    PositivityViolation,
    ScenarioError,
    SelfLoop,
    SingularOutputDerivative,
)

CONSERVATIVE = "conservative"
DISSIPATIVE = "dissipative"


# --------------------------------------------------------------------------
# converter templates
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Quadratic:
    """``h = 0.5 xi' Q xi + a' xi + beta`` with ``xi = [z, y]``.

    ``Q`` and ``a`` run over the converter inputs followed by the output, so
    a relaxable converter has a zero last row/column in ``Q`` and ``a[-1] < 0``.
    """

    Q: np.ndarray
    a: np.ndarray
    beta: float = 0.0

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        a = np.atleast_1d(np.asarray(self.a, dtype=float))
        if Q.shape != (a.size, a.size):
            raise DimensionMismatch(f"Q has shape {Q.shape}, expected {(a.size, a.size)}")
        if not np.allclose(Q, Q.T):
            raise DimensionMismatch("Q must be symmetric")
        if not (np.all(np.isfinite(Q)) and np.all(np.isfinite(a)) and np.isfinite(self.beta)):
            raise ValueError("Quadratic parameters must be finite")
        object.__setattr__(self, "Q", 0.5 * (Q + Q.T))
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "beta", float(self.beta))

    @classmethod
    def from_poly(cls, a2: float, a1: float, a0: float) -> "Quadratic":
        """Single-input converter ``y = a2 u^2 + a1 u + a0``."""
        return cls(Q=np.diag([2.0 * a2, 0.0]), a=np.array([a1, -1.0]), beta=a0)

    @property
    def n_inputs(self) -> int:
        return self.a.size - 1

    @property
    def output_is_linear(self) -> bool:
        return bool(np.all(self.Q[-1] == 0.0))

    def _xi(self, z, y):
        z = np.asarray(z, dtype=float)
        y = np.asarray(y, dtype=float)
        return np.concatenate([z, y[..., None]], axis=-1)

    def value(self, z, y):
        xi = self._xi(z, y)
        return 0.5 * np.einsum("...i,ij,...j->...", xi, self.Q, xi) + xi @ self.a + self.beta

    def grad(self, z, y):
        g = self._xi(z, y) @ self.Q + self.a
        return g[..., :-1], g[..., -1]

    def output(self, z):
        if not self.output_is_linear:
            raise SingularOutputDerivative("output enters quadratically; no closed-form output")
        if self.a[-1] == 0.0:
            raise SingularOutputDerivative("dh/dy is identically zero")
        z = np.asarray(z, dtype=float)
        Qz = self.Q[:-1, :-1]
        model = 0.5 * np.einsum("...i,ij,...j->...", z, Qz, z) + z @ self.a[:-1] + self.beta
        return -model / self.a[-1]

    def inverse(self, y, lo, hi, ref):
        """Input giving output ``y`` (single-input converters only), nearest to ``ref``."""
        if self.n_inputs != 1 or not self.output_is_linear:
            return None
        q, a1, ay = self.Q[0, 0], self.a[0], self.a[-1]
        return _quadratic_root(0.5 * q, a1, self.beta + ay * y, lo, hi, ref)


@dataclass(frozen=True)
class ScaledSquare:
    """``h = c u^2 + d u - y`` on a single input."""

    c: float
    d: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.c) and np.isfinite(self.d)):
            raise ValueError("ScaledSquare parameters must be finite")

    n_inputs = 1

    def value(self, z, y):
        u = np.asarray(z, dtype=float)[..., 0]
        return self.c * u**2 + self.d * u - np.asarray(y, dtype=float)

    def grad(self, z, y):
        u = np.asarray(z, dtype=float)[..., 0]
        return (2.0 * self.c * u + self.d)[..., None], -np.ones_like(u)

    def output(self, z):
        u = np.asarray(z, dtype=float)[..., 0]
        return self.c * u**2 + self.d * u

    def inverse(self, y, lo, hi, ref):
        return _quadratic_root(self.c, self.d, -y, lo, hi, ref)


@dataclass(frozen=True)
class Hyperbolic:
    """``h = 1 - y (u + eps)``: the relation ``y (u + eps) = 1`` on ``u > -eps``."""

    eps: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.eps):
            raise ValueError("Hyperbolic eps must be finite")

    n_inputs = 1

    def value(self, z, y):
        u = np.asarray(z, dtype=float)[..., 0]
        return 1.0 - np.asarray(y, dtype=float) * (u + self.eps)

    def grad(self, z, y):
        u = np.asarray(z, dtype=float)[..., 0]
        y = np.asarray(y, dtype=float)
        return (-y)[..., None] * np.ones_like(u)[..., None], -(u + self.eps) * np.ones_like(y)

    def output(self, z):
        u = np.asarray(z, dtype=float)[..., 0]
        return 1.0 / (u + self.eps)

    def inverse(self, y, lo, hi, ref):
        if y == 0.0:
            return None
        u = 1.0 / y - self.eps
        return u if lo - 1e-12 <= u <= hi + 1e-12 else None


@dataclass(frozen=True, eq=False)
class Linear:
    """``h = a' z + beta - y``."""

    a: np.ndarray
    beta: float = 0.0

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.a, dtype=float))
        if not (np.all(np.isfinite(a)) and np.isfinite(self.beta)):
            raise ValueError("Linear parameters must be finite")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "beta", float(self.beta))

    @property
    def n_inputs(self) -> int:
        return self.a.size

    def value(self, z, y):
        return np.asarray(z, dtype=float) @ self.a + self.beta - np.asarray(y, dtype=float)

    def grad(self, z, y):
        z = np.asarray(z, dtype=float)
        return np.broadcast_to(self.a, z.shape).copy(), -np.ones(z.shape[:-1])

    def output(self, z):
        return np.asarray(z, dtype=float) @ self.a + self.beta

    def inverse(self, y, lo, hi, ref):
        if self.a.size != 1 or self.a[0] == 0.0:
            return None
        u = (y - self.beta) / self.a[0]
        return u if lo - 1e-12 <= u <= hi + 1e-12 else None


TEMPLATES = (Quadratic, ScaledSquare, Hyperbolic, Linear)


def _quadratic_root(qa, qb, qc, lo, hi, ref):
    # root of qa u^2 + qb u + qc = 0 inside [lo, hi], nearest to ref
    if abs(qa) < 1e-300:
        if qb == 0.0:
            return None
        roots = [-qc / qb]
    else:
        disc = qb * qb - 4.0 * qa * qc
        if disc < 0.0:
            if disc > -1e-12 * max(qb * qb, 1.0):
                disc = 0.0
            else:
                return None
        sq = np.sqrt(disc)
        # numerically stable pair
        t = -0.5 * (qb + np.copysign(sq, qb if qb != 0.0 else 1.0))
        roots = [t / qa] + ([qc / t] if t != 0.0 else [])
    inside = [r for r in roots if lo - 1e-12 <= r <= hi + 1e-12]
    if not inside:
        return None
    return float(min(inside, key=lambda r: abs(r - ref)))


# --------------------------------------------------------------------------
# components
# --------------------------------------------------------------------------


def _vec(value, n=None, name="value"):
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if n is not None and arr.ndim == 1 and arr.size == 1 and n != 1:
        arr = np.full(n, arr[0])
    if n is not None and arr.shape[-1] != n:
        raise DimensionMismatch(f"{name} has trailing size {arr.shape[-1]}, expected {n}")
    return arr


@dataclass
class Buffer:
    """Linear energy storage ``x_{k+1} = A x_k + B u_k + f_k``.

    Bounds may be constant vectors or per-step arrays (``(K+1, n_x)`` for
    states, ``(K, n_u)`` for inputs). ``f`` may be a constant vector or a
    ``(K, n_x)`` sequence. ``xK_lo``/``xK_hi`` tighten the terminal state.
    """

    A: np.ndarray
    B: np.ndarray
    x_init: np.ndarray
    x_lo: np.ndarray
    x_hi: np.ndarray
    u_lo: np.ndarray
    u_hi: np.ndarray
    f: np.ndarray | None = None
    xK_lo: np.ndarray | None = None
    xK_hi: np.ndarray | None = None
    cost_a: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        n_x = self.A.shape[0]
        if self.A.shape != (n_x, n_x):
            raise DimensionMismatch(f"A must be square, got {self.A.shape}")
        if self.B.shape[0] != n_x:
            raise DimensionMismatch(f"B has {self.B.shape[0]} rows, expected {n_x}")
        n_u = self.B.shape[1]
        self.x_init = _vec(self.x_init, n_x, "x_init")
        self.x_lo = _vec(self.x_lo, n_x, "x_lo")
        self.x_hi = _vec(self.x_hi, n_x, "x_hi")
        self.u_lo = _vec(self.u_lo, n_u, "u_lo")
        self.u_hi = _vec(self.u_hi, n_u, "u_hi")
        self.f = np.zeros(n_x) if self.f is None else _vec(self.f, n_x, "f")
        self.xK_lo = None if self.xK_lo is None else _vec(self.xK_lo, n_x, "xK_lo")
        self.xK_hi = None if self.xK_hi is None else _vec(self.xK_hi, n_x, "xK_hi")
        self.cost_a = np.zeros(n_u) if self.cost_a is None else _vec(self.cost_a, n_u, "cost_a")
        lo0 = self.x_lo if self.x_lo.ndim == 1 else self.x_lo[0]
        hi0 = self.x_hi if self.x_hi.ndim == 1 else self.x_hi[0]
        if np.any(self.x_init < lo0 - 1e-12) or np.any(self.x_init > hi0 + 1e-12):
            raise ValueError(f"buffer {self.name!r}: x_init outside [x_lo, x_hi]")
        if np.any(np.asarray(self.u_lo) > np.asarray(self.u_hi)):
            raise ValueError(f"buffer {self.name!r}: u_lo > u_hi")

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]


@dataclass
class Converter:
    """Static converter ``h(x, u, y) = 0`` with one scalar output.

    A converter either owns its inputs (``buffer=None``; bounds from
    ``u_lo``/``u_hi``) or reads the state and inputs of an existing buffer.
    ``inputs`` lists the arguments of ``h`` as ``("x", i)``/``("u", i)`` pairs
    local to the subsystem; by default all subsystem inputs, in order.
    """

    template: Quadratic | ScaledSquare | Hyperbolic | Linear
    u_lo: np.ndarray | None = None
    u_hi: np.ndarray | None = None
    buffer: int | None = None
    inputs: Sequence[tuple[str, int]] | None = None
    cost_a: np.ndarray | None = None
    cost_b: float = 0.0
    name: str = ""

    def __post_init__(self):
        if not isinstance(self.template, TEMPLATES):
            raise TypeError(f"unknown converter template {type(self.template).__name__}")
        if self.buffer is None:
            n = self.template.n_inputs
            self.u_lo = _vec(-np.inf if self.u_lo is None else self.u_lo, n, "u_lo")
            self.u_hi = _vec(np.inf if self.u_hi is None else self.u_hi, n, "u_hi")
            self.cost_a = np.zeros(n) if self.cost_a is None else _vec(self.cost_a, n, "cost_a")
            if np.any(self.u_lo > self.u_hi):
                raise ValueError(f"converter {self.name!r}: u_lo > u_hi")
        elif self.u_lo is not None or self.u_hi is not None:
            raise ValueError("a converter attached to a buffer uses the buffer's input bounds")
        if self.inputs is not None:
            self.inputs = tuple((str(kind), int(i)) for kind, i in self.inputs)
            if len(self.inputs) != self.template.n_inputs:
                raise DimensionMismatch(
                    f"template takes {self.template.n_inputs} inputs, got {len(self.inputs)}"
                )
        self.cost_b = float(self.cost_b)

    @property
    def n_owned_inputs(self) -> int:
        return 0 if self.buffer is not None else self.template.n_inputs


def _row(spec, n, name):
    row = np.zeros(n)
    if spec is None:
        return row
    if isinstance(spec, Mapping):
        for idx, coef in spec.items():
            idx = int(idx)
            if not 0 <= idx < n:
                raise DimensionMismatch(f"{name} index {idx} out of range (size {n})")
            row[idx] += float(coef)
        return row
    arr = np.asarray(spec, dtype=float).ravel()
    if arr.size > n:
        raise DimensionMismatch(f"{name} has {arr.size} entries, network has {n}")
    row[: arr.size] = arr
    return row


@dataclass
class Node:
    """Power balance ``e'x + f'u + g'y + s = v``.

    ``e``, ``f`` and ``g`` are either dense rows over the stacked network
    vectors or ``{index: coefficient}`` mappings. ``load`` is a constant or a
    per-step sequence of length K.
    """

    e: Mapping[int, float] | Sequence[float] | None = None
    f: Mapping[int, float] | Sequence[float] | None = None
    g: Mapping[int, float] | Sequence[float] | None = None
    kind: str = CONSERVATIVE
    load: float | Sequence[float] = 0.0
    name: str = ""

    def __post_init__(self):
        if self.kind not in (CONSERVATIVE, DISSIPATIVE):
            raise ValueError(f"node kind must be {CONSERVATIVE!r} or {DISSIPATIVE!r}")


# --------------------------------------------------------------------------
# assembled problem
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ConverterSpec:
    """A converter resolved against the stacked network vectors."""

    name: str
    template: object
    x_idx: np.ndarray  # global state indices of the template arguments
    u_idx: np.ndarray  # global input indices of the template arguments
    arg_kind: tuple  # "x"/"u" per template argument, in order
    arg_idx: np.ndarray  # global index per template argument
    own_x: np.ndarray  # every state of the subsystem
    own_u: np.ndarray  # every input of the subsystem

    def args(self, x, u):
        """Gather template arguments from stacked state and input arrays (leading dims allowed)."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        cols = [
            x[..., i] if kind == "x" else u[..., i]
            for kind, i in zip(self.arg_kind, self.arg_idx)
        ]
        return np.stack(cols, axis=-1)

    def value(self, x, u, y):
        return self.template.value(self.args(x, u), y)

    def output(self, x, u):
        return self.template.output(self.args(x, u))


def _freeze(arr):
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class NetworkProblem:
    """Immutable canonical problem over a horizon of K steps."""

    K: int
    A: np.ndarray
    B: np.ndarray
    f: np.ndarray  # (K, n_x)
    x_init: np.ndarray
    x_lo: np.ndarray  # (K+1, n_x)
    x_hi: np.ndarray
    u_lo: np.ndarray  # (K, n_u)
    u_hi: np.ndarray
    E: np.ndarray  # (J, n_x)
    F: np.ndarray  # (J, n_u)
    G: np.ndarray  # (J, M)
    v: np.ndarray  # (K, J)
    dissipative: np.ndarray  # (J,) bool
    a: np.ndarray  # (n_u,)
    b: np.ndarray  # (M,)
    converters: tuple
    x_names: tuple
    u_names: tuple
    node_names: tuple
    meta: dict = field(default_factory=dict)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def M(self) -> int:
        return len(self.converters)

    @property
    def J(self) -> int:
        return self.E.shape[0]

    @property
    def y_names(self) -> tuple:
        return tuple(c.name for c in self.converters)

    @property
    def gamma_x(self) -> sp.csr_matrix:
        """Unit lower block-bidiagonal map of ``[x_0..x_K]`` (``-A`` below the diagonal)."""
        K, n = self.K, self.n_x
        eye = sp.identity((K + 1) * n, format="csr")
        sub = sp.kron(sp.diags(np.ones(K), -1, shape=(K + 1, K + 1)), sp.csr_matrix(self.A))
        return (eye - sub).tocsr()

    @property
    def gamma_u(self) -> sp.csr_matrix:
        """Strictly lower block map of ``[u_0..u_{K-1}]`` (``-B`` blocks)."""
        K = self.K
        shift = sp.diags(np.ones(K), -1, shape=(K + 1, K))
        return (-sp.kron(shift, sp.csr_matrix(self.B))).tocsr()

    @property
    def gamma_rhs(self) -> np.ndarray:
        """Right-hand side ``[x_init, f_0, ..., f_{K-1}]`` of the stacked dynamics."""
        return np.concatenate([self.x_init, self.f.ravel()])

    def output_derivatives(self, x, u, y):
        """Implicit derivatives ``dy/dx`` (M, n_x) and ``dy/du`` (M, n_u) at one step."""
        dydx = np.zeros((self.M, self.n_x))
        dydu = np.zeros((self.M, self.n_u))
        for m, conv in enumerate(self.converters):
            gz, gy = conv.template.grad(conv.args(x, u), y[m])
            gy = float(gy)
            if gy == 0.0:
                raise SingularOutputDerivative(f"dh/dy = 0 for converter {conv.name!r}")
            gz = np.asarray(gz, dtype=float).ravel()
            for j, (kind, idx) in enumerate(zip(conv.arg_kind, conv.arg_idx)):
                target = dydx if kind == "x" else dydu
                target[m, idx] += -gz[j] / gy
        return dydx, dydu

    def cost(self, u, y) -> float:
        """Original cost ``sum_k a'u_k + b'y_k`` for (K, n_u) and (K, M) trajectories."""
        return float(np.sum(np.asarray(u) @ self.a) + np.sum(np.asarray(y) @ self.b))

    def with_meta(self, **updates) -> "NetworkProblem":
        from dataclasses import replace

        meta = dict(self.meta)
        meta.update(updates)
        return replace(self, meta=meta)

    def converter_index(self, name: str) -> int:
        for m, conv in enumerate(self.converters):
            if conv.name == name:
                return m
        raise KeyError(name)


# --------------------------------------------------------------------------
# builder
# --------------------------------------------------------------------------


class PowerNetwork:
    """Mutable builder; call :meth:`assemble` to obtain a :class:`NetworkProblem`."""

    def __init__(self):
        self.buffers: list[Buffer] = []
        self.converters: list[Converter] = []
        self.nodes: list[Node] = []
        # registration order of input owners: ("buffer", i) / ("converter", i)
        self._input_owners: list[tuple[str, int]] = []

    # ---- indexing -------------------------------------------------------
    @property
    def n_x(self) -> int:
        return sum(b.n_x for b in self.buffers)

    @property
    def n_u(self) -> int:
        return sum(self._owner_width(o) for o in self._input_owners)

    @property
    def M(self) -> int:
        return len(self.converters)

    def _owner_width(self, owner):
        kind, i = owner
        return self.buffers[i].n_u if kind == "buffer" else self.converters[i].n_owned_inputs

    def _input_offset(self, owner):
        off = 0
        for o in self._input_owners:
            if o == owner:
                return off
            off += self._owner_width(o)
        raise KeyError(owner)

    def state(self, buffer: int, i: int = 0) -> int:
        """Global index of state ``i`` of a buffer."""
        if not 0 <= i < self.buffers[buffer].n_x:
            raise IndexError(i)
        return sum(b.n_x for b in self.buffers[:buffer]) + i

    def buffer_input(self, buffer: int, i: int = 0) -> int:
        if not 0 <= i < self.buffers[buffer].n_u:
            raise IndexError(i)
        return self._input_offset(("buffer", buffer)) + i

    def converter_input(self, converter: int, i: int = 0) -> int:
        conv = self.converters[converter]
        if conv.buffer is not None:
            kind, j = (conv.inputs or [("u", k) for k in range(self.buffers[conv.buffer].n_u)])[i]
            if kind == "x":
                raise IndexError("argument is a state; use state()")
            return self.buffer_input(conv.buffer, j)
        if not 0 <= i < conv.n_owned_inputs:
            raise IndexError(i)
        return self._input_offset(("converter", converter)) + i

    def output(self, converter: int) -> int:
        if not 0 <= converter < self.M:
            raise IndexError(converter)
        return converter

    # ---- registration ---------------------------------------------------
    def add_buffer(self, buf: Buffer) -> int:
        if not isinstance(buf, Buffer):
            raise TypeError("expected a Buffer")
        self.buffers.append(buf)
        handle = len(self.buffers) - 1
        self._input_owners.append(("buffer", handle))
        return handle

    def add_converter(self, conv: Converter) -> int:
        if not isinstance(conv, Converter):
            raise TypeError("expected a Converter")
        if conv.buffer is not None:
            if not 0 <= conv.buffer < len(self.buffers):
                raise DimensionMismatch(f"converter refers to unknown buffer {conv.buffer}")
            buf = self.buffers[conv.buffer]
            args = conv.inputs or tuple(("u", k) for k in range(buf.n_u))
            if len(args) != conv.template.n_inputs:
                raise DimensionMismatch(
                    f"template takes {conv.template.n_inputs} inputs, buffer offers {len(args)}"
                )
            for kind, i in args:
                limit = buf.n_x if kind == "x" else buf.n_u
                if kind not in ("x", "u") or not 0 <= i < limit:
                    raise DimensionMismatch(f"bad converter argument {(kind, i)}")
        else:
            for kind, i in conv.inputs or ():
                if kind != "u" or not 0 <= i < conv.n_owned_inputs:
                    raise DimensionMismatch(f"bad converter argument {(kind, i)}")
        self.converters.append(conv)
        handle = len(self.converters) - 1
        if conv.buffer is None:
            self._input_owners.append(("converter", handle))
        return handle

    def _converter_footprint(self, m):
        """States and inputs of converter m's subsystem (global indices)."""
        conv = self.converters[m]
        if conv.buffer is not None:
            b = conv.buffer
            xs = [self.state(b, i) for i in range(self.buffers[b].n_x)]
            us = [self.buffer_input(b, i) for i in range(self.buffers[b].n_u)]
        else:
            xs = []
            us = [self.converter_input(m, i) for i in range(conv.n_owned_inputs)]
        return xs, us

    def validate_node(self, node: Node):
        e = _row(node.e, self.n_x, "e")
        f = _row(node.f, self.n_u, "f")
        g = _row(node.g, self.M, "g")
        if np.any(g < 0):
            m = int(np.flatnonzero(g < 0)[0])
            raise PositivityViolation(f"node {node.name!r}: negative output weight on converter {m}")
        for m in np.flatnonzero(g):
            xs, us = self._converter_footprint(m)
            if np.any(e[xs] != 0) or np.any(f[us] != 0):
                raise SelfLoop(
                    f"node {node.name!r} couples the output of converter {m} with its own state/input"
                )
        return e, f, g

    def add_node(self, node: Node, validate: bool = True) -> int:
        if not isinstance(node, Node):
            raise TypeError("expected a Node")
        if validate:
            self.validate_node(node)
        else:
            _row(node.e, self.n_x, "e"), _row(node.f, self.n_u, "f"), _row(node.g, self.M, "g")
        self.nodes.append(node)
        return len(self.nodes) - 1

    # ---- assembly -------------------------------------------------------
    def assemble(self, horizon: int, loads: Mapping[int, Sequence[float]] | None = None,
                 meta: dict | None = None) -> NetworkProblem:
        """Freeze the declarations into a :class:`NetworkProblem` over ``horizon`` steps.

        ``loads`` optionally overrides node loads by node handle.
        """
        K = int(horizon)
        if K < 1:
            raise ValueError("horizon must be at least 1")
        if not self.nodes:
            raise ValueError("a network needs at least one node")
        n_x, n_u, M, J = self.n_x, self.n_u, self.M, len(self.nodes)

        A = np.zeros((n_x, n_x))
        B = np.zeros((n_x, n_u))
        f = np.zeros((K, n_x))
        x_init = np.zeros(n_x)
        x_lo = np.zeros((K + 1, n_x))
        x_hi = np.zeros((K + 1, n_x))
        u_lo = np.zeros((K, n_u))
        u_hi = np.zeros((K, n_u))
        a = np.zeros(n_u)
        x_names, u_names = [""] * n_x, [""] * n_u

        for bi, buf in enumerate(self.buffers):
            xs = slice(self.state(bi, 0), self.state(bi, 0) + buf.n_x)
            us = slice(self.buffer_input(bi, 0), self.buffer_input(bi, 0) + buf.n_u) if buf.n_u else slice(0, 0)
            A[xs, xs] = buf.A
            B[xs, us] = buf.B
            f[:, xs] = _per_step(buf.f, K, buf.n_x, "f")
            x_init[xs] = buf.x_init
            x_lo[:, xs] = _per_step(buf.x_lo, K + 1, buf.n_x, "x_lo")
            x_hi[:, xs] = _per_step(buf.x_hi, K + 1, buf.n_x, "x_hi")
            if buf.xK_lo is not None:
                x_lo[K, xs] = np.maximum(x_lo[K, xs], buf.xK_lo)
            if buf.xK_hi is not None:
                x_hi[K, xs] = np.minimum(x_hi[K, xs], buf.xK_hi)
            if buf.n_u:
                u_lo[:, us] = _per_step(buf.u_lo, K, buf.n_u, "u_lo")
                u_hi[:, us] = _per_step(buf.u_hi, K, buf.n_u, "u_hi")
                a[us] = buf.cost_a
            name = buf.name or f"buffer{bi}"
            for i in range(buf.n_x):
                x_names[xs.start + i] = name if buf.n_x == 1 else f"{name}[{i}]"
            for i in range(buf.n_u):
                u_names[us.start + i] = name if buf.n_u == 1 else f"{name}[{i}]"
        if np.any(x_lo > x_hi):
            raise ValueError("state bounds are inconsistent (x_lo > x_hi somewhere)")

        specs = []
        b = np.zeros(M)
        for m, conv in enumerate(self.converters):
            name = conv.name or f"converter{m}"
            if conv.buffer is None:
                k0 = self.converter_input(m, 0) if conv.n_owned_inputs else 0
                us = slice(k0, k0 + conv.n_owned_inputs)
                u_lo[:, us] = _per_step(conv.u_lo, K, conv.n_owned_inputs, "u_lo")
                u_hi[:, us] = _per_step(conv.u_hi, K, conv.n_owned_inputs, "u_hi")
                a[us] = conv.cost_a
                for i in range(conv.n_owned_inputs):
                    u_names[k0 + i] = name if conv.n_owned_inputs == 1 else f"{name}[{i}]"
                args = conv.inputs or tuple(("u", i) for i in range(conv.n_owned_inputs))
                arg_idx = [k0 + i for _, i in args]
            else:
                buf = self.buffers[conv.buffer]
                args = conv.inputs or tuple(("u", i) for i in range(buf.n_u))
                arg_idx = [
                    self.state(conv.buffer, i) if kind == "x" else self.buffer_input(conv.buffer, i)
                    for kind, i in args
                ]
            own_x, own_u = self._converter_footprint(m)
            arg_kind = tuple(kind for kind, _ in args)
            arg_idx = np.array(arg_idx, dtype=int)
            specs.append(
                ConverterSpec(
                    name=name,
                    template=conv.template,
                    x_idx=arg_idx[[k == "x" for k in arg_kind]] if arg_idx.size else arg_idx,
                    u_idx=arg_idx[[k == "u" for k in arg_kind]] if arg_idx.size else arg_idx,
                    arg_kind=arg_kind,
                    arg_idx=arg_idx,
                    own_x=np.array(own_x, dtype=int),
                    own_u=np.array(own_u, dtype=int),
                )
            )
            b[m] = conv.cost_b

        E = np.zeros((J, n_x))
        F = np.zeros((J, n_u))
        G = np.zeros((J, M))
        v = np.zeros((K, J))
        dissipative = np.zeros(J, dtype=bool)
        loads = dict(loads or {})
        for j, node in enumerate(self.nodes):
            E[j] = _row(node.e, n_x, "e")
            F[j] = _row(node.f, n_u, "f")
            G[j] = _row(node.g, M, "g")
            load = loads.get(j, node.load)
            load = np.asarray(load, dtype=float)
            if load.ndim == 0:
                v[:, j] = float(load)
            elif load.shape == (K,):
                v[:, j] = load
            else:
                raise ScenarioError(
                    f"node {node.name or j}: load has length {load.size}, horizon is {K}"
                )
            dissipative[j] = node.kind == DISSIPATIVE

        return NetworkProblem(
            K=K,
            A=_freeze(A),
            B=_freeze(B),
            f=_freeze(f),
            x_init=_freeze(x_init),
            x_lo=_freeze(x_lo),
            x_hi=_freeze(x_hi),
            u_lo=_freeze(u_lo),
            u_hi=_freeze(u_hi),
            E=_freeze(E),
            F=_freeze(F),
            G=_freeze(G),
            v=_freeze(v),
            dissipative=np.array(dissipative),
            a=_freeze(a),
            b=_freeze(b),
            converters=tuple(specs),
            x_names=tuple(x_names),
            u_names=tuple(u_names),
            node_names=tuple(n.name or f"node{j}" for j, n in enumerate(self.nodes)),
            meta=dict(meta or {}),
        )


def _per_step(value, steps, n, name):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 1:
        return np.broadcast_to(arr, (steps, n))
    if arr.shape != (steps, n):
        raise ScenarioError(f"{name} has shape {arr.shape}, expected ({steps}, {n}) for this horizon")
    return arr


# --------------------------------------------------------------------------
# converter evaluation
# --------------------------------------------------------------------------


def _local_args(conv: Converter, x, u):
    x = np.atleast_1d(np.asarray(x, dtype=float)) if x is not None else np.zeros(0)
    u = np.atleast_1d(np.asarray(u, dtype=float)) if u is not None else np.zeros(0)
    n_inputs = conv.template.n_inputs
    args = conv.inputs or tuple(("u", i) for i in range(n_inputs))
    return np.array([x[i] if kind == "x" else u[i] for kind, i in args]), args


def eval_converter(conv: Converter, x, u, y) -> float:
    """Residual ``h(x, u, y)``; ``x`` and ``u`` are the subsystem's local vectors."""
    z, _ = _local_args(conv, x, u)
    return float(conv.template.value(z, y))


def converter_jacobian(conv: Converter, x, u, y):
    """Analytic partials ``(dh/dx, dh/du, dh/dy)`` over the subsystem's local vectors.

    Raises SingularOutputDerivative when ``dh/dy`` vanishes, since the implicit
    derivative ``dy/du = -(dh/dy)^-1 dh/du`` is then undefined.
    """
    x = np.zeros(0) if x is None else np.atleast_1d(np.asarray(x, dtype=float))
    u = np.zeros(0) if u is None else np.atleast_1d(np.asarray(u, dtype=float))
    z, args = _local_args(conv, x, u)
    gz, gy = conv.template.grad(z, y)
    gy = float(gy)
    if gy == 0.0:
        raise SingularOutputDerivative("dh/dy vanishes at this point")
    dx = np.zeros(x.size)
    du = np.zeros(u.size)
    for j, (kind, i) in enumerate(args):
        (dx if kind == "x" else du)[i] += float(np.ravel(gz)[j])
    return dx, du, gy


def output_sensitivity(conv: Converter, x, u, y):
    """Implicit derivative ``dy/du`` over the subsystem's local inputs."""
    _, du, gy = converter_jacobian(conv, x, u, y)
    return -du / gy
