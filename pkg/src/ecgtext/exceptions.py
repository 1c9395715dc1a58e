"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or unknown configuration value."""


class DataError(ValueError):
    """Dataset file or record that cannot be used as stored."""


class IncompatibleCheckpointError(ValueError):
    """Checkpoint whose layout or training arm does not match the request."""
