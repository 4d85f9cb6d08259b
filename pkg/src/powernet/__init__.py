"""Optimal control of power networks through convex relaxation.

Networks of linear buffers, static converters and power-balance nodes are
transcribed into second-order cone programs, solved with a self-dual
interior-point method and audited for exactness of the relaxation.
"""
from .checker import RequirementReport, check_licq, check_rank, check_requirements
from .errors import (
    DimensionMismatch, NetworkStructureError, NoDissipativePath, NotExactified, NotRelaxable,
    NotSolved, PositivityViolation, PowerNetError, RequirementUnmet, ScenarioError, SelfLoop,
    SingularOutputDerivative,
)
from .exactness import ExactnessReport, audit, feasible_projection, solve_exact
from .network import (
    CONSERVATIVE, DISSIPATIVE, Buffer, Converter, Hyperbolic, Linear, NetworkProblem, Node,
    PowerNetwork, Quadratic, ScaledSquare,
)
from .oracle import GridSpec, dp_solve, enumerate_toy
from .solver import Solution, kkt_report, solve
from .transcription import (
    ConicProgram, add_regularization, build_relaxation, dump_program, load_program,
)

__version__ = "0.1.0"
