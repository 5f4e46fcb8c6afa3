class PolicySimError(Exception):
    """Base class for every error raised by this package."""


class PreconditionError(PolicySimError, ValueError):
    """An operation was called with inputs that violate its precondition."""
