"""Exception hierarchy shared by every module."""


class PursError(Exception):
    """Base class for all errors raised by this package."""

    kind = "error"


class DimensionError(PursError, ValueError):
    kind = "dimension"


class NumericError(PursError, ArithmeticError):
    kind = "numeric"


class ContractError(PursError, ValueError):
    kind = "contract"


class SchemaError(PursError, ValueError):
    kind = "schema"


class DataError(PursError, ValueError):
    kind = "data"


class TrainingError(PursError, RuntimeError):
    kind = "training"


class MetricError(PursError, ValueError):
    kind = "metric"


class CheckpointError(PursError, IOError):
    kind = "checkpoint"


class VersionError(CheckpointError):
    kind = "version"


class ConfigError(PursError, ValueError):
    kind = "config"


class StateError(PursError, RuntimeError):
    kind = "state"
