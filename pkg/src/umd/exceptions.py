"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Raised for invalid or inconsistent run configuration."""


class NumericalAbort(RuntimeError):
    """Raised when training produces a non-finite loss.

    ``snapshot`` carries the diagnostic state at the failing step.
    """

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = dict(snapshot or {})

