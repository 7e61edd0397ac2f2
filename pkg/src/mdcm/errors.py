"""Exception types shared across the package."""


class MdcmError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(MdcmError):
    """Tensor shapes are incompatible with the requested operation."""


class ContractError(MdcmError):
    """A documented precondition or invariant was violated by the caller."""


class ConfigError(MdcmError):
    """A configuration file or override is malformed or out of range."""


class CheckpointError(MdcmError):
    """A checkpoint file is malformed or does not match the model."""


class DataError(MdcmError):
    """An image or manifest file is malformed."""


class NanLossError(MdcmError):
    """Training produced a NaN loss; the message names the first operation
    on the step's tape whose output contained a NaN."""
