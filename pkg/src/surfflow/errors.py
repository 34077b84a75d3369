"""Exception types raised across the package."""


class SurfFlowError(Exception):
    """Base class for all package errors."""


class ConfigError(SurfFlowError, ValueError):
    """Invalid configuration value."""


class ShapeError(SurfFlowError, ValueError):
    """Array dimensions do not agree."""


class BehindCameraError(SurfFlowError, ValueError):
    """Point projects with non-positive camera depth."""


class InvalidDepthError(SurfFlowError, ValueError):
    """Depth value is not strictly positive."""


class NumericalError(SurfFlowError, FloatingPointError):
    """An energy term evaluated to a non-finite value."""

    def __init__(self, term: str, message: str | None = None):
        self.term = term
        super().__init__(message or f"energy term '{term}' is not finite")


class ConvergenceError(SurfFlowError, RuntimeError):
    """The solver could not produce a finite estimate."""

    def __init__(self, message: str, trace=None):
        self.trace = trace
        super().__init__(message)
