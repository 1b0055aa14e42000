"""Exception hierarchy for the solvers and the iteration driver."""


class RicciSphereError(Exception):
    """Base class for all package errors."""


class SolvabilityViolation(RicciSphereError):
    """Compatibility integral of a Poisson right-hand side is too large."""


class NonConvergence(RicciSphereError):
    """An inner linear solve failed to reach the target residual."""


class PositivityViolation(RicciSphereError):
    """A density left the Kahler cone (1 + Laplacian term became nonpositive)."""


class NewtonDivergence(RicciSphereError):
    """Newton iteration for a nonlinear step failed to converge."""


class MonotonicityViolation(RicciSphereError):
    """Ding energy increased along a run beyond tolerance (solver bug signal)."""


class BalanceDivergence(RicciSphereError):
    """Center-of-mass balancing Newton failed to converge."""


class OptimizationStall(RicciSphereError):
    """A gauge-orbit local search could not improve on its starting point."""


class MalformedSnapshot(RicciSphereError):
    """A snapshot file could not be parsed.

    Carries the 1-based line number where parsing failed, when known.
    """

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line

    def __str__(self):
        msg = super().__str__()
        return msg if self.line is None else f"line {self.line}: {msg}"
