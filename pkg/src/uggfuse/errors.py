"""Exception vocabulary shared across the package.

Every failure mode that callers are expected to catch has a named type;
generic ValueError/TypeError are reserved for programming errors.
"""


class ContractViolationError(ValueError):
    """An argument broke a documented precondition (shape, dtype, range)."""


class DomainError(ValueError):
    """A numeric input left the mathematical domain of an operation."""


class ConfigError(ValueError):
    """Unknown key, unparsable value, or inconsistent configuration."""


class NonFiniteLossError(ArithmeticError):
    """Training produced NaN/inf; message names the first offending term."""


class BadMagicError(IOError):
    """Binary file does not start with the expected magic bytes."""


class VersionMismatchError(IOError):
    """Binary file has an unsupported format version."""


class TruncatedPayloadError(IOError):
    """Binary file ended before the declared payload was complete."""


class MissingCheckpointError(FileNotFoundError):
    """An evaluation run referenced a checkpoint that is not on disk."""
