"""Exception taxonomy shared across the package.

Exit-code mapping for the CLI lives in `xmzsr.cli`.
"""


class XmzsrError(Exception):
    """Base class for all package errors."""


class DimensionError(XmzsrError):
    """Operand shapes do not conform for an operation."""


class NumericError(XmzsrError):
    """A computation produced non-finite values."""


class ContractError(XmzsrError):
    """A caller violated an operation precondition."""


class ConfigError(XmzsrError):
    """Invalid configuration value."""


class DataError(XmzsrError):
    """Semantically invalid data (duplicates, zero vectors, missing classes)."""


class SchemaError(XmzsrError):
    """A file does not match its declared schema."""


class ParseError(SchemaError):
    """A file row could not be parsed; message carries the line number."""


class ScopeError(XmzsrError):
    """Input is outside the supported problem size of an exact oracle."""


class ProtocolError(XmzsrError):
    """Evaluation protocol cannot be satisfied (empty gallery / query pool)."""


class CompatibilityError(XmzsrError):
    """Checkpoint and dataset/config hashes do not match."""
