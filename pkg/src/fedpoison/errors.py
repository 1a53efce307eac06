"""Exception hierarchy shared across the package."""


class FedPoisonError(Exception):
    pass


class ConfigError(FedPoisonError, ValueError):
    """Invalid or unreadable experiment configuration."""


class DataError(FedPoisonError, ValueError):
    """Dataset could not be loaded or violates its invariants."""


class ProtocolError(FedPoisonError):
    """Malformed frame or protocol rule violation on the wire."""
