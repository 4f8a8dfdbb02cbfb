"""Error and warning types shared across the package."""


class HasNetsError(Exception):
    """Base class for all package errors."""


class ConfigurationError(HasNetsError):
    """Invalid argument, config value, or shape mismatch."""


class ParseError(HasNetsError):
    """Malformed binary or text input. Carries a byte offset when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(HasNetsError):
    """Non-finite value produced during a forward or backward pass."""


class DefenseCollapseError(HasNetsError):
    """The trusted set became empty: every training sample was removed."""


class ConsistencyError(HasNetsError):
    """Internal bookkeeping mismatch, e.g. a probe missing a ledger id."""


class DefenseCollapseWarning(UserWarning):
    """The selected set went empty for an iteration; training skips to healing."""
