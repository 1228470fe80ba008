"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration, dataset or hyperparameters."""


class MeasurementUnavailable(ValueError):
    """A measurement cannot be computed from the given input."""


class CheckpointVersionError(RuntimeError):
    """A checkpoint file was written by an incompatible format version."""
