"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand dimensions do not line up."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class ParseError(ValueError):
    """Malformed input file; message carries the offending line number."""


class SizeLimitError(ValueError):
    """Instance exceeds the explicit limits of an exhaustive enumeration."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity showed up where finite math was required."""
