"""Exception hierarchy shared by every pipeline stage.

main.py maps these onto process exit codes, so raise the most specific one.
"""


class EtStpmError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(EtStpmError, ValueError):
    """Invalid configuration value, unknown key, or incompatible channel plan."""


class DataError(EtStpmError, ValueError):
    """Dataset layout or content violates a precondition."""


class DatasetIOError(DataError):
    """An image, mask or output directory could not be read or written."""


class CheckpointCorruptError(DataError):
    """Checkpoint bytes fail the magic, length or CRC checks."""


class ShapeError(EtStpmError, ValueError):
    """Tensor shapes do not line up."""


class UndefinedMetricError(EtStpmError, ValueError):
    """A metric needs both classes present and only one was given."""


class UnsupportedOperationError(EtStpmError, ValueError):
    """The request is well formed but deliberately not supported."""


class StateError(EtStpmError, RuntimeError):
    """The object is not in a state that allows the operation."""


class NumericError(EtStpmError, RuntimeError):
    """A loss went non-finite during training."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step
