"""Exception types shared across the package."""


class BdpError(Exception):
    """Base class for all package-specific errors."""


class ModelError(BdpError):
    """Inadmissible parameters or a malformed model."""


class SpectralDegeneracyError(BdpError):
    """Principal eigen-data could not be extracted reliably.

    Raised when the maximal eigenvalue is not simple (gap below tolerance),
    when an eigenvector has nonpositive components beyond tolerance, or when
    the bordered sensitivity system is singular.
    """


class RejectionBudgetError(BdpError):
    """Rejection sampler exhausted its attempt budget."""

    def __init__(self, attempts: int, survivors: int = 0):
        self.attempts = attempts
        self.survivors = survivors
        self.survival_fraction = survivors / attempts if attempts else 0.0
        super().__init__(
            f"no surviving trajectory in {attempts} attempts "
            f"(empirical survival fraction {self.survival_fraction:.3g})"
        )


class DataInconsistencyError(BdpError):
    """Observed data impossible under the assumed dynamics."""


class InsufficientExposureError(BdpError):
    """A closed-form estimator denominator is zero."""


class OptimizationError(BdpError):
    """An iterative fit failed to converge."""

    def __init__(self, message: str, trace: list | None = None):
        self.trace = trace or []
        super().__init__(message)


class IdentifiabilityError(BdpError):
    """An information matrix is singular or numerically rank-deficient."""


class ExperimentError(BdpError):
    """A batch experiment could not be completed."""
