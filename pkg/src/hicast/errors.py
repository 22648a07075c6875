"""Exception types shared across the package."""


class StateError(RuntimeError):
    """An operation was invoked before its prerequisites exist (e.g. an
    untrained model, a missing upstream checkpoint)."""


class FormatError(ValueError):
    """A file or byte stream does not match its declared on-disk format."""
