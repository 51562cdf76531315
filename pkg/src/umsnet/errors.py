"""Exception types shared across the package.

Each maps to a stable CLI exit code (see cli.py): usage errors exit 2,
config/geometry errors exit 3, data/checkpoint integrity errors exit 4.
"""


class UmsnetError(Exception):
    """Base class for all package errors."""


class DimensionError(UmsnetError):
    """Tensor shapes incompatible with the requested operation."""


class ContractError(UmsnetError):
    """An operation precondition was violated (bad argument values)."""


class ConfigError(UmsnetError):
    """Model / run configuration is internally inconsistent or mismatched."""


class SchemaError(UmsnetError):
    """An input file does not match its declared schema."""


class IntegrityError(UmsnetError):
    """A persisted container is corrupt, truncated, or version-incompatible."""


class UsageError(UmsnetError):
    """Invalid command-line usage."""
