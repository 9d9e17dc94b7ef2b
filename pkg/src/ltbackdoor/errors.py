"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: unknown names, out-of-range settings, bad files."""


class DomainError(ValueError):
    """Operation called with arguments outside its documented domain."""
