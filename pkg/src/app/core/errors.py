from __future__ import annotations


class PipelineError(Exception):
    """Base class for every failure raised by the pipeline."""


class ConfigError(PipelineError, ValueError):
    pass


class ShapeError(PipelineError, ValueError):
    pass


class DataError(PipelineError):
    pass


class LeakageError(DataError):
    """An evaluation split overlaps the data a transform was fitted on."""


class CalibrationError(DataError):
    pass


class NumericalError(PipelineError, ArithmeticError):
    pass


class CheckpointError(DataError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class ManifestError(CheckpointError):
    pass
