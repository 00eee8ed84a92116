"""Exception types shared across the package."""


class DataError(Exception):
    """Malformed or inconsistent input data."""


class EventParseError(DataError):
    """A line of an event file could not be parsed."""

    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


class ValidationError(DataError):
    """Data parsed cleanly but violates a documented invariant."""


class ConfigError(ValueError):
    """Inconsistent or unsupported configuration."""


class NumericError(Exception):
    """A computation produced non-finite values where finite ones are required."""
