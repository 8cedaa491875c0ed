"""Exception types shared across the package."""


class ToolkitError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(ToolkitError, ValueError):
    """Invalid configuration value or combination of values."""


class SchemaError(ToolkitError, ValueError):
    """A file, record, or tensor payload does not match the expected schema."""


class ParseError(ToolkitError, ValueError):
    """Malformed content encountered while reading a serialized file."""


class CapabilityError(ToolkitError, ValueError):
    """An operation needs a feature (typically text features) that is absent."""


class NumericError(ToolkitError, ArithmeticError):
    """A non-finite value appeared where finite arithmetic is required."""
