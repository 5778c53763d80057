class ConfigError(ValueError):
    """Raised when shapes, wiring, or run settings are inconsistent."""


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient is NaN/inf; carries a diagnostic snapshot."""

    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot or {}
