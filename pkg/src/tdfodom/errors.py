"""Exception types shared across the package.

Each error carries an ``exit_code`` so the CLI can map failures to process
exit statuses without a lookup table.
"""

from __future__ import annotations


class TdfOdomError(Exception):
    exit_code = 1


class ConfigurationError(TdfOdomError, ValueError):
    exit_code = 2


class InputError(TdfOdomError):
    """Malformed or inconsistent input data."""

    exit_code = 2


class ParseError(InputError):
    def __init__(self, message: str, path=None, offset: int | None = None, line: int | None = None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        if line is not None:
            where.append(f"line {line}")
        prefix = f"{': '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.path = path
        self.offset = offset
        self.line = line


class StreamOrderError(InputError):
    """Timestamps that go backwards (or repeat) inside a stream."""

    def __init__(self, message: str, previous: float | None = None, current: float | None = None,
                 line: int | None = None):
        super().__init__(message)
        self.previous = previous
        self.current = current
        self.line = line


class InsufficientDataError(TdfOdomError):
    exit_code = 3


class InsufficientOverlapError(InsufficientDataError):
    pass


class GridAllocationError(TdfOdomError, MemoryError):
    exit_code = 4

    def __init__(self, required_bytes: int, available_bytes: int, message: str | None = None):
        super().__init__(
            message or f"grid needs {required_bytes} bytes but only {available_bytes} bytes are available"
        )
        self.required_bytes = required_bytes
        self.available_bytes = available_bytes


class RegistrationError(TdfOdomError):
    exit_code = 3


class NoValidPointsError(RegistrationError):
    def __init__(self, valid: int, required: int):
        super().__init__(f"only {valid} points inside the grid, need at least {required}")
        self.valid = valid
        self.required = required


class DivergedError(RegistrationError):
    pass


class MeasurementError(TdfOdomError):
    pass
