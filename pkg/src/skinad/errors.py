"""Exception types shared across the package."""


class InputError(ValueError):
    """Invalid user input: shapes, counts, out-of-range settings."""


class NumericError(ArithmeticError):
    """A linear-algebra step failed (e.g. a covariance matrix is not PD).

    ``min_eigenvalue`` carries the smallest eigenvalue of the offending
    matrix when it is known.
    """

    def __init__(self, message, min_eigenvalue=None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


class FitError(RuntimeError):
    """Every optimizer start failed to produce a finite log-likelihood."""


class EmptySampleError(RuntimeError):
    """A simulation replication completed no parts within the horizon."""
