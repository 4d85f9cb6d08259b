"""Exception hierarchy shared by the powernet modules."""


class PowerNetError(Exception):
    """Base class for all powernet errors."""


class DimensionMismatch(PowerNetError, ValueError):
    """Array shapes of a component do not agree with each other or the network."""


class NetworkStructureError(PowerNetError, ValueError):
    """A node row breaks the structural requirements of the network."""


class PositivityViolation(NetworkStructureError):
    """A converter output enters a node (or the cost) with a negative weight."""


class SelfLoop(NetworkStructureError):
    """A node couples a converter output with that converter's own state or input."""


class SingularOutputDerivative(PowerNetError, ArithmeticError):
    """The output derivative of a converter vanishes, so y cannot be eliminated."""


class NotRelaxable(PowerNetError, ValueError):
    """The converter template has no convex (conic) relaxation."""


class RequirementUnmet(PowerNetError):
    """A requirement check failed and the caller did not force the relaxation."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class NotSolved(PowerNetError):
    """An operation needs an optimal solution but the solver did not provide one."""


class NotExactified(PowerNetError):
    """The regularization loop ran out of rounds with converters still slack."""

    def __init__(self, message, solution=None, report=None):
        super().__init__(message)
        self.solution = solution
        self.report = report


class NoDissipativePath(PowerNetError):
    """A slack converter cannot be projected onto its manifold without breaking a balance."""


class ScenarioError(PowerNetError, ValueError):
    """Scenario parameters or files are invalid."""
