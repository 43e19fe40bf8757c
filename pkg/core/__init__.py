from core.exceptions import (
    ScanError, DimensionError, ConfigError, DataError, UsageError, ContractError,
    ParseError, FormatError, TruncationError, VersionError
)

__all__ = [
    'ScanError', 'DimensionError', 'ConfigError', 'DataError', 'UsageError', 'ContractError',
    'ParseError', 'FormatError', 'TruncationError', 'VersionError'
]
