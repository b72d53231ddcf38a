"""Exception types raised across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class CheckpointError(ValueError):
    """Malformed checkpoint file or checkpoint/config mismatch."""


class DataError(IOError):
    """Unreadable or unsupported image/mask input."""
