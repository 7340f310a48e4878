"""Exception types shared across modules."""


class ConfigError(ValueError):
    """A configuration value violates a contract (unknown scale, bad stage, ...)."""


class SelectionError(ValueError):
    """An empty or invalid subset selection."""


class StageOrderError(RuntimeError):
    """A training stage was requested before its predecessor completed."""
