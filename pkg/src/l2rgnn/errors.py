"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """A precondition on an argument was violated."""


class ShapeError(ValueError):
    """Array or graph dimensions do not line up."""


class DatasetParseError(ValueError):
    """A dataset file failed to parse; carries the offending line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(ValueError):
    """Records parsed but violate the dataset schema."""


class NumericalError(RuntimeError):
    """A non-finite value appeared where finite numbers are required."""
