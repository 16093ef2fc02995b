"""Exception types."""


class GenservoError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(GenservoError, ValueError):
    pass


class DegenerateConfiguration(GenservoError):
    pass


class NonFiniteObjective(GenservoError, FloatingPointError):
    pass


class OptimizationDiverged(GenservoError):
    pass


class DegenerateMotion(GenservoError):
    pass


class InsufficientCorrespondences(GenservoError):
    pass


class DegenerateRays(GenservoError):
    pass


class NoChainableTimesteps(GenservoError):
    pass


class SeedPairNotFound(GenservoError):
    pass


class InsufficientDetections(GenservoError):
    pass


class AmbiguousPose(GenservoError):
    pass


class IKNotConverged(GenservoError):
    """Raised with the best joints found attached as ``best``."""

    def __init__(self, message, best=None, residual=None):
        super().__init__(message)
        self.best = best
        self.residual = residual


class InferenceNotConverged(GenservoError):
    def __init__(self, message, best=None, residual=None):
        super().__init__(message)
        self.best = best
        self.residual = residual


class ConfigInvalid(GenservoError, ValueError):
    pass


class JointLimitViolation(GenservoError, ValueError):
    pass


class IndexOutOfRange(GenservoError, IndexError):
    pass
