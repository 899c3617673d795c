"""Exception types shared across the package."""


class AvatarError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(AvatarError, ValueError):
    """An argument violates an operation's precondition."""


class ShapeError(ParameterError):
    """Array arguments have inconsistent shapes."""


class DataError(AvatarError):
    """Input data on disk is missing, malformed, or inconsistent."""


class ConfigError(AvatarError):
    """A configuration value is missing or invalid."""


class StateError(AvatarError):
    """An object is not in a state that allows the requested operation."""


class IntegrityError(AvatarError):
    """A persisted artifact is corrupt or truncated."""


class TrainingError(AvatarError):
    """Training produced a non-finite or otherwise unusable value."""
