"""Exception types shared across the solver."""


class InvalidProblem(ValueError):
    """Problem data violates a basic invariant (non-positive impact, horizon, ...)."""


class WellPosednessViolated(RuntimeError):
    """The broker objective is not strictly concave for the requested portfolio."""

    def __init__(self, message, theta=None, margin=None):
        super().__init__(message)
        self.theta = theta
        self.margin = margin


class SolverDidNotConverge(RuntimeError):
    """The stationarity solve left a gradient residual above tolerance."""


class NTooLarge(ValueError):
    """Exhaustive search requested for more agents than the 2^N budget allows."""


class ConfigError(ValueError):
    """Experiment configuration file could not be parsed or validated."""
