"""Exception types shared across the package."""


class NcgpError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(NcgpError):
    """An operand does not have the shape its contract requires."""


class InvalidInput(NcgpError):
    """An input contains non-finite entries or violates a precondition."""


class NotPositiveDefinite(NcgpError):
    """A symmetric factorization hit a non-positive pivot.

    ``dimension`` is the 1-based order of the leading minor that failed.
    """

    def __init__(self, dimension, message=None):
        self.dimension = dimension
        super().__init__(message or f"matrix is not positive definite "
                                    f"(leading minor of order {dimension})")


class CgBreakdown(NcgpError):
    """Conjugate gradients met a search direction with non-positive curvature."""

    def __init__(self, iteration, curvature):
        self.iteration = iteration
        self.curvature = curvature
        super().__init__(f"CG breakdown at iteration {iteration}: "
                         f"p'Ap = {curvature:.3e} <= 0")


class PolicyExhausted(NcgpError):
    """The unit-vector policy has used every coordinate index."""


class ArtifactError(NcgpError):
    """A belief artifact is malformed or has an unsupported version."""


class ConfigError(NcgpError):
    """An experiment configuration failed schema validation."""
