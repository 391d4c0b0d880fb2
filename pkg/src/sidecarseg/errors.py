"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage/configuration -> 1, data -> 2,
training -> 3, integrity (frozen-parameter violation) -> 4.
"""


class SidecarSegError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SidecarSegError):
    """Invalid model, training, or run configuration."""


class DimensionError(SidecarSegError):
    """Tensor shape incompatible with the operation."""


class ScheduleError(SidecarSegError):
    """Malformed protocol string or inconsistent class-id sets."""


class DataError(SidecarSegError):
    """Label or image content violates the configured universe."""


class IngestionError(DataError):
    """Dataset directory is malformed (unpaired or unreadable files)."""


class EmptyStepError(DataError):
    """No image in the source dataset contains the step's novel classes."""


class EmptySupervisionError(SidecarSegError):
    """A loss or metric was asked to average over zero valid pixels."""


class TrainingDivergenceError(SidecarSegError):
    """Loss became non-finite during optimization."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class VerificationError(SidecarSegError):
    """Digest and partition disagree on which parameters they cover."""


class FrozenViolationError(SidecarSegError):
    """A parameter that must stay frozen changed during training."""

    def __init__(self, message: str, parameter: str | None = None):
        super().__init__(message)
        self.parameter = parameter


class EvaluationError(SidecarSegError):
    """Metric is undefined for the given inputs."""


class UndefinedROCError(EvaluationError):
    """ROC requires at least one positive and one negative pixel."""
