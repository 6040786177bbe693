"""Exception hierarchy shared by every agcmnet module."""


class AgcmError(Exception):
    """Base class for all errors raised by agcmnet."""


class ShapeError(AgcmError, ValueError):
    pass


class ConfigError(AgcmError, ValueError):
    pass


class UsageError(AgcmError, RuntimeError):
    pass


class NumericError(AgcmError, FloatingPointError):
    pass


class DataError(AgcmError, ValueError):
    pass


class OptimizerError(AgcmError, RuntimeError):
    pass


class CheckpointError(AgcmError, ValueError):
    pass


class PnmError(DataError):
    """Malformed PNM stream; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset
