"""
Error types raised by the scan toolkit.
Every engine raises one of these so the CLI can report a single line and exit.
"""
from typing import Optional


class ScanError(ValueError):
    """Base class for all toolkit errors"""


class DimensionError(ScanError):
    pass


class ConfigError(ScanError):
    pass


class DataError(ScanError):
    pass


class UsageError(ScanError):
    pass


class ContractError(ScanError):
    pass


class ParseError(ScanError):

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(ScanError):

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class TruncationError(FormatError):
    pass


class VersionError(FormatError):
    pass
