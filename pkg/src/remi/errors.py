"""Exception hierarchy shared by every remi module."""


class RemiError(Exception):
    """Base class for all errors raised by remi."""


class DimensionError(RemiError, ValueError):
    """Array shapes do not compose."""


class NumericError(RemiError, ArithmeticError):
    """A NaN or infinity showed up where finite values are required."""


class StateError(RemiError, RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class InputError(RemiError, ValueError):
    """Invalid user-supplied data or arguments."""


class FormatError(InputError):
    """A file on disk is malformed, truncated or of an unknown version."""


class AccessError(RemiError, PermissionError):
    """A white-box quantity was requested in black-box mode."""


class TrainingError(RemiError, RuntimeError):
    """Training diverged."""

    def __init__(self, message, epoch=None):
        super().__init__(message if epoch is None else f"epoch {epoch}: {message}")
        self.epoch = epoch


class StallError(TrainingError):
    """Unlearning made no progress because the attack model saturated."""


class ConfigError(InputError):
    """Experiment configuration is invalid."""


class StageError(RemiError, RuntimeError):
    """A pipeline stage failed; carries the stage tag."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
