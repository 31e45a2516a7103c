"""Exception hierarchy shared by every pdtlab module."""


class PdtError(Exception):
    """Base class for all pdtlab errors."""


class ContractError(PdtError, ValueError):
    """A precondition of an operation was violated by the caller."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class ConfigError(PdtError, ValueError):
    """Invalid or unknown configuration value."""


class DataError(PdtError):
    """Input data is malformed, too sparse, or otherwise unusable."""


class NumericError(PdtError, ArithmeticError):
    """A NaN/Inf appeared during training, or a gradient check failed."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class IntegrityError(DataError):
    """A binary file failed its checksum or is truncated."""


class FormatVersionError(DataError):
    """A binary file was written with an unsupported format version."""
