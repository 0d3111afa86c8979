class ConfigError(ValueError):
    """Bad configuration value or inconsistent setup."""


class DatasetError(IOError):
    """On-disk dataset is missing files or structurally broken."""
