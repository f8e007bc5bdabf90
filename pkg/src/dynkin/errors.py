"""Exception hierarchy shared by every solver and harness."""


class DynkinError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(DynkinError):
    pass


class CalibrationInfeasible(DynkinError):
    pass


class SizeLimit(DynkinError):
    pass


class ObstacleOrderViolation(DynkinError):
    pass


class TerminalMismatch(DynkinError):
    pass


class UnknownCatalogId(DynkinError):
    pass


class MonotonicityViolated(DynkinError):
    def __init__(self, message, sample=None):
        super().__init__(message)
        self.sample = sample


class StepContractionViolated(DynkinError):
    pass


class NonConvergence(DynkinError):
    pass


class SaddleViolation(DynkinError):
    def __init__(self, message, player=None, gap=None):
        super().__init__(message)
        self.player = player
        self.gap = gap


class IsaacsViolated(DynkinError):
    pass


class OrderingCertificateFalse(DynkinError):
    pass


class HypothesisUnmet(DynkinError):
    pass


class CflViolated(DynkinError):
    pass
