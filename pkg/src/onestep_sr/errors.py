class ConfigError(ValueError):
    """Invalid configuration or precondition on user-supplied parameters."""


class ShapeError(ValueError):
    pass


class NonFiniteError(RuntimeError):
    """Raised when a loss term or sampler state stops being finite.

    ``term`` names the offending loss term or sampling step.
    """

    def __init__(self, term: str, message: str | None = None):
        self.term = term
        super().__init__(message or f"non-finite value in {term}")
