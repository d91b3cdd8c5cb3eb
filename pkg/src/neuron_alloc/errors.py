"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class NeuronAllocError(Exception):
    exit_code = 2


class UsageError(NeuronAllocError):
    """Wrong call order or invalid arguments (exit code 1)."""

    exit_code = 1


class ConfigError(UsageError, ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"invalid config field '{field}': {message}")
        self.field = field


class DataError(NeuronAllocError):
    """Malformed corpora, artifacts or mismatched fingerprints (exit code 2)."""


class ShapeError(DataError, ValueError):
    pass


class FormatVersionError(DataError):
    pass


class NumericError(NeuronAllocError, ArithmeticError):
    """Non-finite values or empty loss support (exit code 3)."""

    exit_code = 3
