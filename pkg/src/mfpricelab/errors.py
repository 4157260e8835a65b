"""Exception types shared across the package."""


class PriceLabError(Exception):
    """Base class for all package errors."""


class ModelError(PriceLabError):
    """A coefficient or model specification is invalid (carries the offending point)."""

    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class EstimationError(PriceLabError):
    """A conditional-expectation estimate could not be formed (e.g. empty bucket, no fallback)."""


class PicardError(PriceLabError):
    """The inner Picard loop failed to converge; carries the residual trace."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = list(trace)


class DivergenceError(PriceLabError):
    """The price fixed-point iteration diverged; carries the residual trace."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = list(trace)


class ConfigError(PriceLabError):
    """A run configuration file is malformed or out of range."""
