"""Exception types shared across the pipeline.

Each carries the CLI exit code it maps to.
"""


class VadError(Exception):
    exit_code = 1


class ConfigError(VadError, ValueError):
    """Invalid configuration; ``field`` names the offending setting."""

    exit_code = 1

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class FormatError(VadError):
    """Corrupt or inconsistent on-disk data; ``offset`` is a byte offset when known."""

    exit_code = 2

    def __init__(self, message, path=None, offset=None):
        self.path = path
        self.offset = offset
        where = ""
        if path is not None:
            where += f" [{path}"
            if offset is not None:
                where += f" @ byte {offset}"
            where += "]"
        super().__init__(message + where)


class ShapeError(VadError, ValueError):
    exit_code = 1

    def __init__(self, what, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: expected shape {expected}, got {tuple(actual)}")


class NumericalError(VadError, ArithmeticError):
    """Non-finite loss during training."""

    exit_code = 3

    def __init__(self, step, terms):
        self.step = step
        self.terms = dict(terms)
        super().__init__(f"non-finite loss at step {step}: {self.terms}")


class UndefinedMetricError(VadError, ValueError):
    exit_code = 2
