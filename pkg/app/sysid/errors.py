"""Exceptions raised by the identification library."""


class SysIdError(Exception):
    """Base class for all identification errors."""


class NonPositiveDefinite(SysIdError):
    """A covariance factorization failed (invalid hyperparameters or noise variance)."""


class SingularInformation(SysIdError):
    """The PEM information matrix cannot be inverted at the estimate."""


class TruncationStarvation(SysIdError):
    """Too few Gaussian draws fell inside the stability region."""


class ChainStalled(SysIdError):
    """The Metropolis chain accepted less than 1% of its proposals."""


class AllFitsFailed(SysIdError):
    """Every order of an order-selection sweep failed to fit."""


class ZeroTrueNorm(SysIdError, ValueError):
    """The reference impulse response has zero norm."""


class EmptySet(SysIdError, ValueError):
    """A confidence set without members was passed to a metric."""
