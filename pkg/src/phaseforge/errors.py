"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """A configuration is invalid or two settings are incompatible."""


class ProviderError(RuntimeError):
    """A phonetic feature provider could not be loaded or used."""


class TrainingError(RuntimeError):
    """Training aborted (e.g. a non-finite loss)."""
