"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid configuration: shape mismatch, bad hyper-parameter, missing field."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""
