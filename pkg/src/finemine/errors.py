"""Shared exception types."""


class ValidationError(ValueError):
    """A caller-supplied value violates a documented precondition."""


class IntegrityError(ValueError):
    """Persisted data is corrupt or violates a structural invariant."""
