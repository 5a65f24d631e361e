class ConfigError(ValueError):
    """Invalid experiment configuration; message names the offending field."""


class NumericError(RuntimeError):
    """A non-finite value appeared during training or integration."""
