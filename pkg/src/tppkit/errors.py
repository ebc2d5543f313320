"""Exception types shared across the toolkit."""


class TPPError(Exception):
    """Base class for toolkit errors."""


class ShapeError(TPPError, ValueError):
    pass


class NumericalError(TPPError, ArithmeticError):
    """A NaN/Inf appeared, or a function was evaluated outside its domain."""


class ValidationError(TPPError, ValueError):
    """Malformed input data, configuration or checkpoint."""
