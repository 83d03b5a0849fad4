"""Exception types shared across the toolkit."""


class ShapeMismatchError(ValueError):
    """Operands have incompatible shapes."""


class GradientStateError(RuntimeError):
    """Backward called twice on the same graph without resetting gradients."""


class ConfigurationError(ValueError):
    """A config value (dims, bit-width, step budget, ...) is invalid."""


class SequencingError(RuntimeError):
    """Schedule phases executed out of order."""


class MissingStatsError(RuntimeError):
    """Threshold initialization requested before calibration ran."""


class DataError(ValueError):
    """Corpus or batch contents violate the task contract."""


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


class CheckpointFormatError(ValueError):
    """Checkpoint file is not parseable (bad magic, truncation, unknown kind)."""


class CheckpointIntegrityError(ValueError):
    """Checkpoint parsed but its checksum does not match the payload."""
