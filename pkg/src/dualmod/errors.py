"""Exception types shared across the package."""


class DualModError(Exception):
    """Base class for all package errors."""


class DimensionError(DualModError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(DualModError, RuntimeError):
    """A precondition of an operation was violated."""


class ConfigError(DualModError, ValueError):
    """Invalid configuration value."""


class InputError(DualModError, ValueError):
    """Invalid or misaligned input data."""


class LoadError(DualModError, IOError):
    """A file on disk could not be loaded."""


class ParseError(LoadError):
    """A text file on disk is malformed."""


class GenerationError(DualModError, RuntimeError):
    """Synthetic data generation failed."""
