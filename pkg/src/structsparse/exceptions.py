"""Exception hierarchy shared across the package."""


class StructSparseError(Exception):
    """Base class for all package errors."""


class DimensionError(StructSparseError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(StructSparseError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(StructSparseError, ValueError):
    """An experiment configuration is invalid."""


class FormatError(StructSparseError, ValueError):
    """A file does not follow the expected binary layout."""


class CorruptionError(FormatError):
    """A checkpoint failed its integrity check."""
