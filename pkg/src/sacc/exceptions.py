"""Exception types raised by the package."""


class DegenerateDistributionError(ValueError):
    """Head-size distribution has no mass where it is queried."""


class GridMismatchError(ValueError):
    """Two fields or a field and a model live on different grids."""


class SingularFormError(ValueError):
    """The quadratic form (covariance + jitter) cannot be inverted."""


class GridTooLargeError(ValueError):
    """Dense covariance requested for a grid above the size guard."""


class ShapeError(ValueError):
    """Feature tensor or layer graph has inconsistent dimensions."""


class FitDivergedError(RuntimeError):
    """Line search found no decrease within the backtracking budget."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])
