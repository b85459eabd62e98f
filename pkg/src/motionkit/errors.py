"""Exception hierarchy.

Two families matter to callers: :class:`DataError` for malformed or missing
inputs and :class:`NumericalError` for degenerate numerical situations.  The
CLI maps them to distinct exit codes.
"""


class MotionKitError(Exception):
    """Base class for all toolkit errors."""


class DataError(MotionKitError, ValueError):
    """Invalid, inconsistent or missing input data."""


class NumericalError(MotionKitError, ArithmeticError):
    """A computation is degenerate (zero power, empty support, ...)."""


class DegenerateScaleError(NumericalError):
    """The flow scale factor came out as zero."""


class UnscorableClipError(NumericalError):
    """No valid pixel was available to score a clip."""
