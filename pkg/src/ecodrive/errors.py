"""Exception types shared across the package.

The CLI maps these onto its documented exit codes, so new failure modes
should reuse one of the classes below rather than raising bare exceptions.
"""


class ScenarioError(ValueError):
    """Scenario file is missing, malformed, has unknown keys, or violates an invariant."""


class AdmissibilityError(ValueError):
    """A control outside [-1, 1] or another admissibility violation."""


class InfeasibleError(RuntimeError):
    """No feasible plan or trip exists for the requested problem."""


class GridConfigError(RuntimeError):
    """Numerical configuration rejected, e.g. the semi-Lagrangian foot-point bound."""


class ExtrapolationError(ValueError):
    """A state query outside the grid extent."""
