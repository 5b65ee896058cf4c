"""Exception and warning types shared across the package."""


class DelaySmoothError(Exception):
    """Base class for all package errors."""


class ValidationError(DelaySmoothError, ValueError):
    """Input violates a structural or standing condition."""


class DomainError(DelaySmoothError, ValueError):
    """Argument outside the domain of an operation (negative time, empty window, ...)."""


class StepMismatchError(DelaySmoothError, ValueError):
    """Time step incompatible with the horizon or with the tail grid."""


class SingularCovarianceError(DelaySmoothError, ArithmeticError):
    """Reduced covariance below the inversion floor where an inverse is required."""


class RegimeError(DelaySmoothError, ValueError):
    """Requested computation needs a regime or smoothness class the inputs do not carry."""


class NonContractionError(DelaySmoothError, RuntimeError):
    """Fixed-point iteration failed to contract."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class EstimatorDisagreement(UserWarning):
    """Two Monte Carlo estimators of the same quantity disagree beyond tolerance."""


class ExtrapolationWarning(UserWarning):
    """A query point fell outside the stored space grid and was clamped."""
