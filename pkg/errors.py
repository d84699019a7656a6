"""Exception types shared by the normalization lab."""

from typing import Optional


class NormLabError(Exception):
    """Base class for every error raised by the lab."""


class DimensionError(NormLabError, ValueError):
    """Shapes, channel counts or partitions do not line up."""


class ConfigurationError(NormLabError, ValueError):
    """A scheme, config value or grid violates its constraints."""


class DomainError(NormLabError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class NumericError(NormLabError, ArithmeticError):
    """A computation produced NaN or Inf."""


class SamplingError(NormLabError, ValueError):
    """A batch sampler cannot satisfy its composition constraints."""


class InputError(NormLabError):
    """A required input file or directory is missing or unreadable."""


class TrainingError(NormLabError):
    """Training diverged."""

    def __init__(self, message: str, epoch: Optional[int] = None):
        self.epoch = epoch
        if epoch is not None:
            message = f"{message} (epoch {epoch})"
        super().__init__(message)


CONFIG_EXIT_CODE = 2
NUMERIC_EXIT_CODE = 3


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the CLI exit code."""
    if isinstance(error, (NumericError, TrainingError)):
        return NUMERIC_EXIT_CODE
    return CONFIG_EXIT_CODE
