"""Exception hierarchy shared by every kdlab module."""


class KDLabError(Exception):
    """Base class for all kdlab errors."""


class ShapeError(KDLabError, ValueError):
    """Operand extents are incompatible."""


class ContractError(KDLabError, RuntimeError):
    """A call violated a documented pre-condition (e.g. gradient into a frozen net)."""


class InvalidInputError(KDLabError, ValueError):
    """Non-finite input caught while anomaly checking is enabled."""


class ConfigError(KDLabError, ValueError):
    """Bad model/experiment/run configuration."""

    def __init__(self, message, *, field=None, line=None):
        self.message = message
        self.field = field
        self.line = line
        where = []
        if field is not None:
            where.append(f"field {field!r}")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class DataError(KDLabError, ValueError):
    """Dataset contents violate a contract (labels out of range, empty, ...)."""


class IDXParseError(DataError):
    """Base class for IDX decoding failures."""


class IDXMagicError(IDXParseError):
    pass


class IDXTruncatedError(IDXParseError):
    pass


class IDXCountMismatchError(IDXParseError):
    pass


class CheckpointError(KDLabError, IOError):
    """Base class for checkpoint read failures."""


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass
