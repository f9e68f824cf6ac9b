"""Exception hierarchy shared across the package.

User-facing tools map ``ConfigError``/``FormatError`` (and plain missing
files) to exit code 2 and everything else to exit code 1.
"""


class PqPimError(Exception):
    """Base class for all package errors."""

    kind = "error"


class FormatError(PqPimError):
    """Malformed binary input. Carries the byte offset of the problem."""

    kind = "format-error"

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TruncatedFileError(FormatError):
    kind = "truncated-file"


class DimensionError(PqPimError):
    """Shapes inconsistent with the declared configuration."""

    kind = "dimension-error"


class ConfigError(PqPimError):
    """Invalid user-supplied configuration value."""

    kind = "config-error"


class CapacityError(PqPimError):
    """A hardware resource (banks, rows) cannot hold the request."""

    kind = "capacity-error"


class ProtocolError(PqPimError):
    """Illegal DRAM command sequence. Carries the offending command index."""

    kind = "protocol-error"

    def __init__(self, message: str, command_index: int | None = None):
        if command_index is not None:
            message = f"{message} (command index {command_index})"
        super().__init__(message)
        self.command_index = command_index
