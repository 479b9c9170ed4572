"""Exception types shared across the package."""


class AgentAttnError(Exception):
    """Base class for all errors raised by agentattn."""


class DimensionError(AgentAttnError, ValueError):
    """Shapes of the operands are incompatible."""


class DTypeError(AgentAttnError, TypeError):
    """Unsupported or mismatched dtype."""


class ConfigError(AgentAttnError, ValueError):
    """Invalid configuration or hyperparameter."""


class NumericDomainError(AgentAttnError, ArithmeticError):
    """A computation left its numeric domain (vanishing denominator, NaN, Inf)."""

    def __init__(self, message, location=None):
        super().__init__(message if location is None else f"{message} (at {location})")
        self.location = location


class ResourceError(AgentAttnError, RuntimeError):
    """Allocation failed; ``partial`` holds whatever results were completed."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = list(partial or [])
