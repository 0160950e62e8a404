"""Exception and warning types.

Every exception carries a short machine-readable ``code`` so the command
line front end can map it to an exit status and a JSON error payload.
"""

from __future__ import annotations


class ExtSensError(Exception):
    """Base class for all errors raised by :mod:`extsens`."""

    code = "error"


class ValidationError(ExtSensError, ValueError):
    """Invalid input: bad parameters, malformed data or violated preconditions."""

    code = "invalid_input"


class RankDeficiencyError(ValidationError):
    """A design or covariate matrix does not have full column rank."""

    code = "rank_deficient"

    def __init__(self, message: str, columns: list[int] | None = None):
        super().__init__(message)
        self.columns = list(columns or [])


class SeparationError(ValidationError):
    """Conditional likelihood is monotone; the MLE is at +/- infinity."""

    code = "separation"

    def __init__(self, message: str, direction: int):
        super().__init__(message)
        self.direction = direction


class EnumerationLimitError(ValidationError):
    """Brute-force oracle refused because the search space is too large."""

    code = "enumeration_limit"


class NumericalError(ExtSensError, ArithmeticError):
    """A numerical routine failed to reach its tolerance."""

    code = "numerical_failure"


class ConvergenceError(NumericalError):
    """Iterative solver stopped at its iteration cap without converging."""

    code = "no_convergence"

    def __init__(self, message: str, last_iterate=None, residual: float | None = None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual = residual


class BracketError(NumericalError):
    """A root-finding bracket could not be established."""

    code = "bad_bracket"


class SensitivityWarning(UserWarning):
    """Base class for diagnostic warnings."""


class HajekWarning(SensitivityWarning):
    """One pair dominates the variance; the normal approximation is suspect."""


class BaselineWarning(SensitivityWarning):
    """The null is not rejected at Gamma = Gammabar = 1."""


class OptimalityFallbackWarning(SensitivityWarning):
    """The exact binomial route does not apply; the QP route was used instead."""


class MonotonicityWarning(SensitivityWarning):
    """A decision was not monotone over a search bracket; a grid scan was used."""


class CalibrationWarning(SensitivityWarning):
    """A calibration estimate is degenerate (flat likelihood, exact fit, infinite odds)."""
