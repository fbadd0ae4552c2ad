"""Exception types raised across the toolkit."""


class DataError(ValueError):
    """Malformed or invalid trajectory data."""


class ConvergenceError(RuntimeError):
    """An iterative fit failed to converge.

    The last iterate is kept on ``last_iterate`` so callers can inspect it.
    """

    def __init__(self, message, last_iterate=None, iterations=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.iterations = iterations


class SingularMatrixError(ArithmeticError):
    """A curvature matrix that must be inverted is singular or ill-conditioned."""


class DegenerateWeightsError(ValueError):
    """Importance weights span more than double precision can represent."""


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
