"""Exception types shared across the package."""


class UpqError(Exception):
    """Base class for all library errors."""


class ContractViolation(UpqError, ValueError):
    """An operation was called with arguments that break its contract."""


class NumericError(UpqError, ArithmeticError):
    """Non-finite values were produced or supplied where finite ones are required."""


class DegenerateRowError(ContractViolation):
    """A per-channel operation hit a row it cannot handle (all-zero, step size <= 0)."""

    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


class ConfigurationError(UpqError, ValueError):
    """A run/corpus configuration is unusable (empty corpus, too little data, ...)."""


class OptimizationError(UpqError, RuntimeError):
    """An optimization loop diverged or produced non-finite values."""


class FormatError(UpqError, ValueError):
    """A serialized artifact (checkpoint, metrics file) is malformed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
