"""Exception and warning types shared across the package."""


class KernelAttentionError(Exception):
    """Base class for all errors raised by this package."""


class ArgumentError(KernelAttentionError, ValueError):
    """Invalid argument: bad shape, out-of-range parameter, mismatched grids."""


class NumericError(KernelAttentionError, ArithmeticError):
    """A computation produced a non-finite or otherwise unusable number."""


class DegenerateDensityError(NumericError):
    """The unnormalized density has (numerically) zero mass."""


class StateError(KernelAttentionError, RuntimeError):
    """An operation was called before the state it depends on exists."""


class TrainingError(NumericError):
    """Training diverged."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class IntegrationWarning(UserWarning):
    """Adaptive quadrature stopped at its panel cap before converging."""
