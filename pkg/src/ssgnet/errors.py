"""Exception types shared across the package."""


class SsgError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(SsgError, ValueError):
    """A documented precondition was violated by the caller."""


class DimensionError(ContractError):
    """Tensor or matrix shapes do not line up."""


class InputRangeError(ContractError):
    """Input values fall outside the documented range."""


class DecodeError(SsgError, ValueError):
    """A file could not be decoded (bad format, corrupt data)."""


class CheckpointVersionError(DecodeError):
    """Checkpoint carries an unknown format version."""
