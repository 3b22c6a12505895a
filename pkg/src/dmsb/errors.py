class DomainError(ValueError):
    """An input lies outside the domain where a model quantity is defined."""


class UsageError(RuntimeError):
    """An object was used in a state that does not allow the call."""


class DivergenceError(FloatingPointError):
    """Training or sampling produced a non-finite number."""
