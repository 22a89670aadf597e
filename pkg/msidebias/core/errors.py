from typing import Any, Dict, Optional


class MsiDebiasError(Exception):
    """Base class for every error raised by msidebias.

    ``exit_code`` plays the role an HTTP status code plays for a web
    endpoint: the command layer turns it into the process exit status.
    """

    exit_code = 3

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details: Dict[str, Any] = details

    def to_payload(self) -> Dict[str, Any]:
        """Machine-readable form written to stderr by the command layer"""
        payload = {
            "error": type(self).__name__,
            "exit_code": self.exit_code,
            "message": self.message,
        }
        payload.update(self.details)
        return payload


# Configuration (exit 2)

class ConfigError(MsiDebiasError):
    exit_code = 2

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message, field=field)
        self.field = field


# Generation / computation / training (exit 3)

class DimensionError(MsiDebiasError):
    pass


class NumericError(MsiDebiasError):
    pass


class EncodingError(MsiDebiasError):
    pass


class ContractError(MsiDebiasError):
    pass


class DegenerateCohortError(MsiDebiasError):
    pass


class EmptyCohortError(MsiDebiasError):
    pass


class EmptyInputError(MsiDebiasError):
    pass


class StratificationError(MsiDebiasError):
    pass


class TrainingError(MsiDebiasError):
    def __init__(self, message: str, iteration: int):
        super().__init__(message, iteration=iteration)
        self.iteration = iteration


class UndefinedMetricError(MsiDebiasError):
    pass


class DomainError(MsiDebiasError):
    pass


class DegenerateVarianceError(MsiDebiasError):
    pass


class StainEstimationError(MsiDebiasError):
    pass


class DegenerateStainError(StainEstimationError):
    pass


class SizeError(MsiDebiasError):
    pass


class MetadataError(MsiDebiasError):
    pass


# Artifacts (exit 4)

class MissingArtifactError(MsiDebiasError):
    exit_code = 4


class ManifestParseError(MsiDebiasError):
    exit_code = 4

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[str] = None):
        location = ""
        if line is not None:
            location = f"line {line}"
            if column is not None:
                location += f", column '{column}'"
            location += ": "
        super().__init__(f"{location}{message}", line=line, column=column)
        self.line = line
        self.column = column
