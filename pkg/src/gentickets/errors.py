"""Exception types shared across the package."""


class GenTicketsError(Exception):
    """Base class for all package errors."""


class ContractError(GenTicketsError, ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    """Operand shapes are incompatible for the requested op."""


class NumericError(GenTicketsError, ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""


class ConfigError(GenTicketsError, ValueError):
    """An experiment or model configuration is invalid."""


class IncompatibleError(ContractError):
    """Two architectures cannot exchange masks or weights."""


class UnsupportedArchitectureError(ContractError):
    """The network lacks structure an operation depends on (e.g. batchnorm)."""


class StructuralError(GenTicketsError):
    """Channel compression would leave the network inconsistent."""


class DegenerateSaliencyError(GenTicketsError):
    """Pruning-at-init scores carry no information (all-zero gradients)."""


class FormatError(GenTicketsError, ValueError):
    """A binary file does not follow its declared format."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CorruptionError(FormatError):
    """A checkpoint failed its checksum or ended early."""


class VersionError(FormatError):
    """A checkpoint was written with an unknown format version."""


class UsageError(GenTicketsError):
    """An API was called in a way that cannot be meaningful."""
