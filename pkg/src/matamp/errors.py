"""Exception types shared across the package."""


class InvalidInput(ValueError):
    """Raised when an argument violates a documented precondition."""


class NotFound(LookupError):
    """Raised when a requested record or experiment does not exist."""
