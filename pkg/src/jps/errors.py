"""Exception hierarchy.

Each class carries the process exit code the CLI maps it to.
"""


class JPSError(Exception):
    exit_code = 1


class ConfigError(JPSError):
    exit_code = 2


class ValidationError(ConfigError):
    pass


class DimensionError(ValidationError, ValueError):
    pass


class DomainError(ValidationError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class SizeError(ValidationError):
    pass


class ProvenanceError(JPSError):
    exit_code = 3


class TrainingError(JPSError):
    """Non-finite loss or other numeric failure."""

    exit_code = 4


class GradCheckError(TrainingError):
    pass
