"""Exception hierarchy shared across the package."""


class TargetCorrError(Exception):
    """Base class for all package errors."""


class DimensionError(TargetCorrError, ValueError):
    """Input shapes disagree; ``dimension`` names the offending axis."""

    def __init__(self, message, dimension=None):
        super().__init__(message)
        self.dimension = dimension


class NumericalError(TargetCorrError, ArithmeticError):
    """A factorization failed or the system is too ill-conditioned to trust.

    ``condition`` holds the condition-number estimate when one is available.
    """

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class DegenerateDecayError(NumericalError):
    """Raised when eta * gamma == 1 makes the regularized closed form singular."""


class DegenerateSchurError(NumericalError):
    """Schur complement of the past/new kernel blocks is not positive definite."""


class ExplicitFeaturesRequired(TargetCorrError, TypeError):
    """The operation needs a kernel with an explicit feature map."""


class StorageGuardError(TargetCorrError, MemoryError):
    """Requested dense Gram exceeds the configured size guard."""


class ConfigError(TargetCorrError, ValueError):
    """Malformed experiment or task configuration."""
