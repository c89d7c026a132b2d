"""Exception hierarchy shared by every stage of the pipeline."""

from typing import Optional


class CodaError(Exception):
    """Base class for all pipeline failures reported by the CLI."""


class DatasetParseError(CodaError, ValueError):
    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class SchemaError(CodaError, ValueError):
    pass


class SplitError(CodaError, ValueError):
    pass


class EmbeddingError(CodaError, KeyError):
    def __str__(self) -> str:
        # KeyError quotes its argument; keep the plain message
        return str(self.args[0]) if self.args else ""


class ConfigurationError(CodaError, ValueError):
    pass


class InfeasibleConfigError(ConfigurationError):
    pass


class ContractViolation(CodaError, RuntimeError):
    pass


class MetricsError(CodaError, ValueError):
    pass


class CheckpointError(CodaError, ValueError):
    pass
