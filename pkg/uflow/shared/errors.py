from __future__ import annotations


class UFlowError(Exception):
    """Base error for every failure the pipeline reports by name."""

    def __init__(self, message: str, exit_code: int = 1):
        super().__init__(message)
        self.exit_code = exit_code


class ShapeError(UFlowError):
    """Array dimensions disagree with what an operation needs."""


class DomainError(UFlowError):
    """A numeric argument lies outside the function's domain."""


class ParameterError(UFlowError):
    """An operation parameter is invalid (even window, empty batch, ...)."""


class InvertibilityError(UFlowError):
    """A flow layer would not be invertible with the given parameters."""


class ConfigError(UFlowError):
    def __init__(self, message: str):
        super().__init__(message, exit_code=2)


class ArtifactError(UFlowError):
    """Missing input files or an output directory that must not be overwritten."""

    def __init__(self, message: str):
        super().__init__(message, exit_code=3)


class ParseError(UFlowError):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message if field is None else f"{message} ({field})", exit_code=4)
        self.field = field


class NumericError(UFlowError):
    def __init__(self, message: str, layer: str | None = None):
        super().__init__(message if layer is None else f"{message} at {layer}")
        self.layer = layer


class TrainingError(UFlowError):
    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(f"{message} (epoch {epoch}, batch {batch})", exit_code=5)
        self.epoch = epoch
        self.batch = batch


class UndefinedMetricError(UFlowError):
    """A metric is undefined for the given labels (single class, no positives)."""
