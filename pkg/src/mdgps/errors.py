class InvalidInputError(ValueError):
    """Dimension mismatches, non positive-definite covariances, malformed inputs."""


class NumericalError(RuntimeError):
    """A numerical procedure failed; ``step`` names the offending time step when known."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step
