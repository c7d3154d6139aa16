"""Exception and warning types shared across the toolkit."""


class VirtIHCError(Exception):
    """Base class for all toolkit errors."""


class InputValidationError(VirtIHCError, ValueError):
    pass


class DimensionError(VirtIHCError, ValueError):
    pass


class DegenerateInputError(VirtIHCError, ValueError):
    """Input has no usable variation (e.g. a flat histogram or an all-zero matrix)."""


class DegenerateHistogramError(DegenerateInputError):
    pass


class InsufficientTissueError(VirtIHCError, ValueError):
    pass


class InsufficientSamplesError(VirtIHCError, ValueError):
    pass


class SingularMatrixError(VirtIHCError, ValueError):
    pass


class ParseError(VirtIHCError, ValueError):
    pass


class StateError(VirtIHCError, RuntimeError):
    pass


class NumericError(VirtIHCError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


class DegenerateValueWarning(UserWarning):
    """A degenerate statistic was replaced by a safe default."""
