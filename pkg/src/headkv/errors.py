class HeadKVError(ValueError):
    """Base class for every error raised by this package."""


class ConfigError(HeadKVError):
    """Malformed or inconsistent experiment configuration."""


class InvariantViolation(HeadKVError):
    """A runtime check on budgets, caches or traces failed."""
