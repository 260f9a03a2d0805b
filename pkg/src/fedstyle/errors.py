"""Exception types shared across the package."""


class FedstyleError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(FedstyleError, ValueError):
    """Array arguments do not satisfy a documented shape contract."""


class ConfigError(FedstyleError, ValueError):
    """Invalid configuration value, file, or key."""


class DegenerateInputError(FedstyleError, ValueError):
    """Numerically degenerate input (zero rows, non-finite values, ...)."""


class SamplingError(FedstyleError, ValueError):
    """Batch construction contract cannot be satisfied."""


class SplitError(FedstyleError, ValueError):
    """Query/gallery split contract cannot be satisfied."""


class StateError(FedstyleError, RuntimeError):
    """Operation invoked on uninitialized or inconsistent state."""


class EvalError(FedstyleError, ValueError):
    """Evaluation input violates its contract."""


class InitError(FedstyleError, ValueError):
    """Memory initialization received an unusable dataset."""
