"""Exception types raised across the package."""


class WkbpError(Exception):
    """Base class for all package errors."""


class MalformedFileError(WkbpError, ValueError):
    pass


class EmptyRecordError(WkbpError, ValueError):
    pass


class EmptyInputError(WkbpError, ValueError):
    pass


class NoBeatsError(WkbpError, ValueError):
    pass


class WindowTooShortError(WkbpError, ValueError):
    pass


class DegenerateChannelError(WkbpError, ValueError):
    pass


class TooFewBeatsError(WkbpError, ValueError):
    pass


class TooFewSamplesError(WkbpError, ValueError):
    pass


class ShapeMismatchError(WkbpError, ValueError):
    pass


class NonScalarLossError(WkbpError, ValueError):
    pass


class NonFiniteError(WkbpError, FloatingPointError):
    """A computation produced inf or NaN.

    ``where`` names the op or integrator stage, ``step`` the solver step
    index when the failure happened inside an integrator.
    """

    def __init__(self, message, where=None, step=None):
        super().__init__(message)
        self.where = where
        self.step = step


class AllStepsSkippedError(WkbpError, RuntimeError):
    pass


class CheckpointError(WkbpError, ValueError):
    pass


class ConfigError(WkbpError, ValueError):
    pass
