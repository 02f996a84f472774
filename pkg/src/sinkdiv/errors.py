"""Exception hierarchy shared by every module."""


class SinkdivError(Exception):
    """Base class for all errors raised by sinkdiv."""


class InputError(SinkdivError, ValueError):
    """Malformed or out-of-contract input (bad shapes, weights, flags, CSV)."""


class UnsupportedInstanceError(InputError):
    """The instance is valid but outside what the requested solver handles."""


class NumericalError(SinkdivError, ArithmeticError):
    """A computation produced NaN/Inf or hit an unrecoverable numeric limit."""


class StabilizationRequired(NumericalError):
    """The multiplicative Sinkhorn path under/overflowed; use the log domain."""


class NonDifferentiableError(NumericalError):
    """A gradient was requested at a point where the cost is not differentiable."""


class StabilizationWarning(RuntimeWarning):
    """Gibbs kernel entries underflowed to zero."""
