"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError/DataError -> 3,
NumericalError -> 4 (argparse itself exits 2 on usage errors).
"""


class ConfigError(ValueError):
    """Invalid configuration value or unknown config key."""


class DataError(Exception):
    """Malformed file, header mismatch, or non-finite payload."""


class NumericalError(ArithmeticError):
    """NaN/Inf gradients, diverging loss, or invalid numeric domain."""


class SessionError(RuntimeError):
    """Streaming session used after close or in an invalid state."""
