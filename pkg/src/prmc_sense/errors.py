"""Exception hierarchy shared by all modules.

Each class carries an ``exit_code`` used by the command-line entry point.
"""
from __future__ import annotations


class PrmcSenseError(Exception):
    exit_code = 1


class ValidationError(PrmcSenseError, ValueError):
    """Model or input fails structural validation."""
    exit_code = 2


class DomainError(ValidationError):
    """Expression evaluated outside its domain (log of a non-positive
    number, fractional power of a negative number, division by zero)."""


class MissingParameter(ValidationError, KeyError):
    """A parameter is referenced but has no value."""

    def __str__(self):
        return Exception.__str__(self)


class GraphPreservationError(ValidationError):
    """An instantiated transition leaves (0, 1] or a row does not sum to one."""


class ReachabilityError(ValidationError):
    """Some reachable state cannot reach a terminal state."""


class EmptyUncertaintySet(PrmcSenseError):
    """The concrete polytope of a state contains no distribution."""
    exit_code = 3

    def __init__(self, state: int, message: str | None = None):
        self.state = state
        super().__init__(message or f"uncertainty set of state {state} is empty")


class NotDifferentiable(PrmcSenseError):
    """The robust solution function is not differentiable at the point."""
    exit_code = 4

    def __init__(self, verdict, message: str | None = None):
        self.verdict = verdict
        super().__init__(message or f"not differentiable: {verdict.reason}")


class NumericalError(PrmcSenseError, ArithmeticError):
    exit_code = 5


class SingularMatrix(NumericalError):
    """A pivot fell below the singularity threshold during factorization."""


class LpError(NumericalError):
    """The LP solver failed internally (iteration limit, numerical breakdown)."""
