"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when tensor shapes or spatial extents are incompatible."""


class ContractError(RuntimeError):
    """Raised when a call violates an API precondition (e.g. non-scalar loss)."""


class NumericalError(FloatingPointError):
    """Raised as soon as an operation produces NaN or Inf."""


class ConfigError(ValueError):
    """Raised for invalid or unknown configuration values."""


class DatasetError(IOError):
    """Raised when a dataset directory is malformed."""
