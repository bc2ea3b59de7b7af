class SpiError(Exception):
    """Base class for toolkit errors."""


class ConfigurationError(SpiError, ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(SpiError, ValueError):
    """A file does not match its documented byte layout."""


class StageError(SpiError, RuntimeError):
    """A pipeline stage failed."""
