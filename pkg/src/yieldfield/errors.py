"""Exception hierarchy shared across the package.

Validation and parsing problems map to CLI exit code 2, numerical and
convergence failures to exit code 1.
"""


class YieldFieldError(Exception):
    """Base class for all package errors."""


class ParseError(YieldFieldError):
    """Malformed input text. Carries the 1-based line number when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(YieldFieldError):
    """Inputs violate a documented precondition or invariant."""


class DomainError(YieldFieldError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class SizeError(YieldFieldError):
    """Requested problem size exceeds a hard limit."""


class LocationError(YieldFieldError):
    """A point falls outside the mesh hull. Carries the point index."""

    def __init__(self, message, index=None):
        self.index = index
        super().__init__(message)


class AssemblyError(YieldFieldError):
    """Dimension mismatch while assembling a latent Gaussian model."""


class NumericalError(YieldFieldError):
    """Factorization or linear-algebra failure. Carries a pivot index when known."""

    def __init__(self, message, pivot=None):
        self.pivot = pivot
        super().__init__(message)


class ApproximationError(YieldFieldError):
    """Rational approximation produced unusable coefficients."""


class ConvergenceError(YieldFieldError):
    """Iterative scheme failed to converge. Carries the iteration trajectory."""

    def __init__(self, message, trajectory=None):
        self.trajectory = trajectory
        super().__init__(message)
