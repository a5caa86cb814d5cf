"""Exception types shared across pipeline stages."""


class ContractError(ValueError):
    """Caller violated an operation contract (shapes, arguments, protocol)."""


class StateError(RuntimeError):
    """Operation requires weights or state that are not loaded/initialized."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
