"""Exception hierarchy shared by every module in the package."""


class PHError(Exception):
    """Base class for all package errors."""


class DimensionError(PHError, ValueError):
    pass


class ConfigError(PHError, ValueError):
    pass


class DataError(PHError, ValueError):
    pass


class CheckPreconditionError(PHError, RuntimeError):
    pass


class FrozenParameterError(PHError, RuntimeError):
    """Raised when a frozen tensor is handed to an optimizer or trained against."""


class ValidationError(PHError, ValueError):
    pass


class NotFoundError(PHError, LookupError):
    pass


class CorruptionError(PHError, IOError):
    """A stored model file failed its checksum or structural checks."""


class FormatError(CorruptionError):
    pass
