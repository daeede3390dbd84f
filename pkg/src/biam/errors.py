"""Exception hierarchy shared across the engine.

Exit-code mapping used by the CLI: config problems exit 2, data problems
(files, labels, shapes of stored data) exit 3, verification failures exit 4.
"""


class BiamError(Exception):
    """Base class for all engine errors."""

    exit_code = 1


class ConfigError(BiamError):
    """Invalid model/run configuration (e.g. head count not dividing d_r)."""

    exit_code = 2


class DimensionError(BiamError):
    """Operand shapes are incompatible for an operation."""

    exit_code = 2


class ParameterError(BiamError):
    """Scalar argument out of its valid range (e.g. top-k count)."""

    exit_code = 2


class DegenerateBatchError(BiamError):
    """Batch statistics requested over fewer than two values."""

    exit_code = 2


class NumericError(BiamError):
    """Non-finite value encountered where finiteness is required."""

    exit_code = 4


class DataError(BiamError):
    """Base class for problems with stored or supplied data."""

    exit_code = 3


class FormatError(DataError):
    """Malformed binary or text file; carries the failing byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class LabelError(DataError):
    """Label index outside the class range."""


class DatasetError(DataError):
    """Dataset record inconsistent with the model configuration."""


class MetricError(DataError):
    """Evaluation input on which the metric is undefined."""


class VerificationError(BiamError):
    """A verification check failed."""

    exit_code = 4
