"""Derivatives of (robust) expected-reward solutions of parametric Markov chains."""
from __future__ import annotations

from .errors import (DomainError, EmptyUncertaintySet, GraphPreservationError, MissingParameter,
                     NotDifferentiable, NumericalError, ReachabilityError, SingularMatrix, ValidationError)
from .expr import Instantiation, Parameter, ParameterSet, differentiate, evaluate
from .models import PMC, PRMC, ParametricPolytope, instantiate_pmc, instantiate_prmc, interval_prmc
from .pmc import (derivative_rhs, derivatives_for_subset, gradient_adjoint, gradient_explicit,
                  solve_expected_reward, topk)
from .prmc import (check_differentiability, extract_active_sets, robust_gradient, robust_gradient_all,
                   robust_solve, topk_robust)

__version__ = "0.1.0"

__all__ = [
    "DomainError", "EmptyUncertaintySet", "GraphPreservationError", "MissingParameter", "NotDifferentiable",
    "NumericalError", "ReachabilityError", "SingularMatrix", "ValidationError",
    "Instantiation", "Parameter", "ParameterSet", "differentiate", "evaluate",
    "PMC", "PRMC", "ParametricPolytope", "instantiate_pmc", "instantiate_prmc", "interval_prmc",
    "derivative_rhs", "derivatives_for_subset", "gradient_adjoint", "gradient_explicit",
    "solve_expected_reward", "topk",
    "check_differentiability", "extract_active_sets", "robust_gradient", "robust_gradient_all",
    "robust_solve", "topk_robust",
]
