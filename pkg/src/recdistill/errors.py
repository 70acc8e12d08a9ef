"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array or parameter shapes do not line up."""


class NumericError(ArithmeticError):
    """A non-finite value showed up where a finite one is required."""


class ConfigError(ValueError):
    """Invalid or unknown configuration; ``key`` names the offending config key when known."""

    def __init__(self, message, key=None):
        self.key = key
        super().__init__(message)


class DuplicateSignalError(KeyError):
    """A (sample_id, teacher_version) pair was appended twice."""


class SignalParseError(ValueError):
    def __init__(self, path, line_number, message):
        self.path = str(path)
        self.line_number = line_number
        super().__init__(f"{path}:{line_number}: {message}")


class UndefinedMetricError(ValueError):
    """Metric is not defined for the given input (e.g. AUC with one class)."""
