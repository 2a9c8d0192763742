"""Exception types shared across the package."""


class MpcSwitchError(Exception):
    """Base class for all package errors."""


class ConfigError(MpcSwitchError):
    """Invalid configuration, path, or problem topology."""


class ModelError(MpcSwitchError):
    """Invalid model usage (unknown latent value, dimension mismatch)."""


class NumericsError(MpcSwitchError):
    """Non-finite values encountered where finite numbers are required."""
