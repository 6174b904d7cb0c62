"""Exception hierarchy shared across the package."""


class DiffCloneError(Exception):
    """Base class for all package errors."""


class ShapeError(DiffCloneError, ValueError):
    pass


class ConfigError(DiffCloneError, ValueError):
    pass


class UsageError(DiffCloneError, RuntimeError):
    pass


class FormatError(DiffCloneError, ValueError):
    """A file is not in a recognised format or version."""


class CorruptionError(DiffCloneError, ValueError):
    """A file has the right format but its content is damaged or inconsistent."""


class EmptySelectionError(DiffCloneError, ValueError):
    """A filter removed every trajectory."""
