"""Exception types shared across the package."""


class KanjiBenchError(Exception):
    """Base class for all package errors."""


class InvalidArgument(KanjiBenchError, ValueError):
    pass


class InvalidSpec(KanjiBenchError, ValueError):
    """An architecture spec whose shapes do not chain."""


class InvalidInput(KanjiBenchError, ValueError):
    """A tensor or image with the wrong rank, channels or spatial size."""


class NoData(KanjiBenchError):
    pass


class FormatError(KanjiBenchError):
    """A checkpoint/container file that is truncated, corrupt or of the wrong version."""


class FamilyMismatch(FormatError):
    pass


class ConfigError(KanjiBenchError, ValueError):
    """Raised for an invalid experiment config; carries the offending key and line."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        self.message = message
        self.key = key
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key '{key}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class TrainingAborted(KanjiBenchError):
    """Training hit a non-finite loss. ``diagnostic_path`` points at the last finite state, if saved."""

    def __init__(self, message: str, diagnostic_path=None):
        super().__init__(message)
        self.diagnostic_path = diagnostic_path
