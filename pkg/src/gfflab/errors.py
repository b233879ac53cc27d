"""Exception hierarchy shared by all modules.

Exit-code mapping used by the CLI: DomainError/ValidationError -> 2,
InsufficiencyError -> 3, NumericError/ConvergenceError -> 4.
"""


class GffLabError(Exception):
    """Base class for all package errors."""


class DomainError(GffLabError):
    """An argument is outside the operation's domain (bad site, bad box, ...)."""


class ValidationError(GffLabError):
    """Configuration or manifest failed validation."""


class NumericError(GffLabError):
    """A linear solve or numeric routine failed."""


class ConvergenceError(NumericError):
    """A requested tolerance could not be reached within budget."""

    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved


class InsufficiencyError(GffLabError):
    """Not enough conditioned replicas (or usable scales) to produce an estimate."""

    def __init__(self, message, achieved_counts=None):
        super().__init__(message)
        self.achieved_counts = achieved_counts


class PlanningError(GffLabError):
    """Requested experiment is infeasible (memory or scale) before sampling starts."""
