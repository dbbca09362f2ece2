"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class BoundsError(IndexError):
    """A slice or index falls outside the tensor's extent."""


class ContractError(ValueError):
    """An operation was called in a way its contract forbids."""


class ConfigError(ValueError):
    """A configuration value or key is invalid."""


class FormatError(ValueError):
    """A serialized artifact is malformed.

    Carries the byte offset at which parsing failed when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
