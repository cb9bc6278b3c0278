"""Exception hierarchy shared across the package."""


class MixclassError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MixclassError, ValueError):
    """Invalid model, gating, prior or run configuration."""


class DomainError(MixclassError, ValueError):
    """A response value outside the support of its family."""


class NumericError(MixclassError, ArithmeticError):
    """A non-finite intermediate quantity.

    ``row`` holds the index of the first offending observation when known.
    """

    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"{message} (row {row})")
        self.row = row


class DegenerateCategoryError(MixclassError, ValueError):
    """A category with zero probability where a positive one is required."""


class BoundaryError(MixclassError, ValueError):
    """Parameter on the boundary of its space where derivatives are undefined."""


class QuadratureError(MixclassError, ArithmeticError):
    """Adaptive integration ran out of subdivisions before reaching tolerance."""

    def __init__(self, message, value=None, err_est=None, entry=None):
        super().__init__(message)
        self.value = value
        self.err_est = err_est
        self.entry = entry


class ConvergenceError(MixclassError, RuntimeError):
    """An iterative fit did not converge; ``best`` carries the best iterate."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class StratumCollapseError(MixclassError, ValueError):
    """An observed-category stratum has no rows, so its gating row is unidentified."""
