"""Exception types raised across the package."""

import numpy as np


class PlqSysIdError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(PlqSysIdError, ValueError):
    pass


class DimensionError(PlqSysIdError, ValueError):
    pass


class RankDeficiencyError(PlqSysIdError, ValueError):
    pass


class UnboundedPenaltyError(PlqSysIdError, ArithmeticError):
    """The supremum defining a PLQ function is +inf at the requested point."""


class FactorizationError(PlqSysIdError, np.linalg.LinAlgError):
    """A symmetric factorization hit a pivot below its tolerance."""


class ValidationError(PlqSysIdError, ValueError):
    """A problem violates one of the interior-point hypotheses.

    The ``diagnostic`` attribute names the violated hypothesis.
    """

    def __init__(self, diagnostic):
        super().__init__(diagnostic)
        self.diagnostic = diagnostic


class DataError(PlqSysIdError, ValueError):
    """Input series are unusable (too short, mismatched, rank deficient)."""
