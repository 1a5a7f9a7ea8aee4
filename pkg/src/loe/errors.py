"""Exception hierarchy shared by the library and the CLI."""


class LoeError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigurationError(LoeError, ValueError):
    exit_code = 2


class DataError(LoeError, ValueError):
    exit_code = 3


class InputError(DataError):
    """A non-finite or malformed sample was fed to a model."""


class StateError(LoeError, RuntimeError):
    exit_code = 1


class UndefinedMetricError(DataError):
    """A metric was requested that cannot be computed (e.g. one class only)."""


class TrainingDivergence(LoeError, FloatingPointError):
    exit_code = 4

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.history = None
