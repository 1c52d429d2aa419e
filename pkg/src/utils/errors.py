"""Exception hierarchy shared by the lab modules, the CLI and the service."""

from typing import Any, Dict, Optional


class LabError(Exception):
    """Base class for all laboratory errors."""

    exit_code = 1

    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.context = dict(context or {})

    def to_dict(self) -> Dict[str, Any]:
        return {"error": type(self).__name__, "message": str(self), **self.context}


class ConfigurationError(LabError, ValueError):
    """Invalid experiment configuration, chart definition or function spec."""

    exit_code = 2


class PreconditionError(LabError, ValueError):
    """An operation was called outside its documented preconditions."""

    exit_code = 2


class BudgetExceededError(LabError):
    """An enumeration would exceed its configured budget.

    Lattice enumerations also carry the proven lower bound on the first
    minimum available at the point of refusal.
    """

    exit_code = 3

    def __init__(
        self,
        message: str,
        budget: int,
        required: float,
        lambda1_lower_bound: Optional[float] = None,
        context: Optional[Dict[str, Any]] = None
    ):
        ctx = {"budget": budget, "required": required, **(context or {})}
        if lambda1_lower_bound is not None:
            ctx["lambda1_lower_bound"] = lambda1_lower_bound
        super().__init__(message, ctx)
        self.budget = budget
        self.required = required
        self.lambda1_lower_bound = lambda1_lower_bound


class CertificationError(LabError):
    """A constructed witness failed its own verification."""

    exit_code = 1


class CounterexampleError(LabError):
    """An experiment found a counterexample to an asserted inequality."""

    exit_code = 1
