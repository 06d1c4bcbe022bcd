"""Exception types shared across modules."""


class ConfigError(ValueError):
    """An invalid or inconsistent configuration value; ``key`` names the offending setting."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key
