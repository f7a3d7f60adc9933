"""Exception types shared across the package."""


class EcimError(Exception):
    """Base class for all package errors."""


class ConfigError(EcimError, ValueError):
    """Invalid configuration: bad value, unknown key, or shape mismatch."""


class UsageError(EcimError, RuntimeError):
    """API called in the wrong order (e.g. backward without a forward cache)."""


class NonFiniteError(EcimError, FloatingPointError):
    """A NaN or infinity reached a place where it must not."""


class DensityInconsistencyError(EcimError, ValueError):
    """Density after an update is lower than before it."""


class DivergenceError(EcimError, RuntimeError):
    """Training produced non-finite parameters or losses and was aborted."""
