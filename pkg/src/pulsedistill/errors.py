"""Exception types shared across the package."""


class ContractError(ValueError):
    """An argument violates a documented precondition."""


class FormatError(ValueError):
    """A container file is malformed.

    Carries the byte offset at which parsing failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(ValueError):
    """A configuration value or key is invalid."""
