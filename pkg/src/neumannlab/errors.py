"""Exception and warning types raised across the package."""


class NeumannLabError(Exception):
    """Base class for all package errors."""


class RectangleCorner(NeumannLabError):
    """A boundary operation was requested too close to a rectangle corner."""


class UnsupportedDrift(NeumannLabError):
    """The drift has no registered closed-form Hessian bound."""


class UnsupportedShape(NeumannLabError):
    """No evaluation route exists for this shape."""


class ProjectionFailure(NeumannLabError):
    """Nearest-point projection was ambiguous; the time step is too large."""

    def __init__(self, message, path_index=None):
        super().__init__(message)
        self.path_index = path_index


class OverflowGuard(NeumannLabError):
    """A per-path weight exceeded the overflow threshold."""


class ResolutionTooCoarse(NeumannLabError):
    """The PDE grid failed its mass-conservation check."""


class NoisyLimit(NeumannLabError):
    """The small-time extrapolation fit was dominated by noise."""

    def __init__(self, message, estimate=None):
        super().__init__(message)
        self.estimate = estimate


class DegenerateGradient(NeumannLabError):
    """|grad f| vanishes at the evaluation point."""


class ConfigError(NeumannLabError):
    """Invalid experiment configuration."""


class StepClipped(UserWarning):
    """A finite-difference step was shrunk to stay inside the domain."""
