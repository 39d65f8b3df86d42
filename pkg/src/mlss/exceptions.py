"""Exception types shared across the package."""


class NumericalError(RuntimeError):
    """A linear-algebra or optimisation step failed in a way that indicates a
    degenerate model or data problem (non-positive-definite covariance,
    singular moment matrix, diverging solver) rather than a usage error."""
