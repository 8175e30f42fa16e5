"""Exception types raised across the toolkit."""


class AmslocError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgumentError(AmslocError, ValueError):
    pass


class InvalidSpecError(InvalidArgumentError):
    pass


class DegenerateMaterialError(InvalidArgumentError):
    pass


class DegenerateGeometryError(InvalidArgumentError):
    pass


class DegenerateSpectrumError(AmslocError):
    """A spectral vector has zero norm, so cosine similarity is undefined."""

    def __init__(self, message, angle=None):
        super().__init__(message)
        self.angle = angle


class ConfigurationError(AmslocError):
    pass


class NotFoundError(AmslocError):
    pass


class CorruptFrameError(AmslocError):
    pass


class RangingUnavailableError(AmslocError):
    pass


class InfeasibleMeasurementError(AmslocError):
    pass


class SolverFailureError(AmslocError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CapacityError(AmslocError):
    pass


class UsageError(AmslocError):
    pass
