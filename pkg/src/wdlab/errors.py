"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Input violates a precondition (shape mismatch, non-finite entries, ...)."""


class DegenerateInputError(ValueError):
    """Quantity is undefined for this input (e.g. stable rank of a zero matrix)."""


class UnsupportedOperationError(ValueError):
    """Operation is not defined for this architecture."""


class InvalidRegimeError(ValueError):
    """Hyperparameters fall outside the regime where a bound is valid."""


class KinkError(ValueError):
    """A ReLU pre-activation sits exactly on 0; caller should perturb and retry."""


class ConfigError(ValueError):
    """Configuration document is malformed; ``path`` names the offending field."""

    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
        self.message = message


class FormatError(ValueError):
    """Binary file does not follow the expected layout."""

    def __init__(self, message, offset=None, field=None):
        where = []
        if field is not None:
            where.append(f"field {field!r}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)
        self.offset = offset
        self.field = field


class DivergenceError(RuntimeError):
    """Training produced a non-finite state.

    ``last_checkpoint`` holds the most recent finite record (may be None).
    """

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
