"""Exception types shared across the package."""


class UnrectError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(UnrectError, ValueError):
    """Invalid argument, configuration value, or file content."""


class ShapeError(ValidationError):
    """Operand shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(shapes)
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


class DistortionDomainError(UnrectError):
    """Distortion coefficients are not invertible over the requested image footprint."""


class InversionError(UnrectError):
    """Iterative undistortion failed to reach the requested tolerance.

    Carries the worst residual (normalized units) and how many points failed.
    """

    def __init__(self, msg: str, worst_residual: float, n_failed: int):
        self.worst_residual = worst_residual
        self.n_failed = n_failed
        super().__init__(msg)


class DivergenceError(UnrectError):
    """An optimization loop produced a non-finite loss value."""

    def __init__(self, msg: str, iteration: int, trace=None, checkpoint_path=None):
        self.iteration = iteration
        self.trace = trace
        self.checkpoint_path = checkpoint_path
        super().__init__(msg)
