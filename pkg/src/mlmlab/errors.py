"""Shared exception types."""


class ValidationError(ValueError):
    """A configuration or precondition check failed before any work started."""
