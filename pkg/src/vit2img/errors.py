"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError (and subclasses) -> 3, NumericError -> 4.
"""


class Vit2ImgError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(Vit2ImgError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(Vit2ImgError, ValueError):
    """A configuration value violates a documented constraint."""


class ContractError(Vit2ImgError, ValueError):
    """A caller broke an API precondition (non-scalar loss, missing grad, ...)."""


class DataError(Vit2ImgError, ValueError):
    """Bad input data: malformed files, out-of-range labels, empty sets."""


class DecodeError(DataError):
    """An image file could not be decoded; message includes the byte offset."""


class NumericError(Vit2ImgError, ArithmeticError):
    """A numeric invariant failed at runtime (NaN loss, non-PSD matrix)."""


class CheckpointError(DataError):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    """The checkpoint was written by an unsupported format version."""


class CheckpointFormatError(CheckpointError):
    """The checkpoint file is truncated or corrupt (bad magic, bad CRC)."""


class CheckpointMismatchError(CheckpointError):
    """The checkpoint's parameter name set does not match the target model."""
