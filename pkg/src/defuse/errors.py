"""Exception hierarchy shared by every module of the package."""


class DefuseError(Exception):
    """Base class for all numerical and usage failures raised by defuse."""


class GeometryError(DefuseError):
    pass


class BandCoversDomain(GeometryError):
    pass


class InterfaceTouchesBoundary(GeometryError):
    pass


class DegenerateNormal(GeometryError):
    pass


class ProjectionFailed(GeometryError):
    pass


class NonFiniteOutput(DefuseError):
    pass


class ShapeMismatch(DefuseError):
    pass


class NonFiniteLoss(DefuseError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class EmptyBandSide(DefuseError):
    pass


class NonFiniteUpdate(DefuseError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class DivergedTraining(DefuseError):
    pass


class MissingDirichlet(DefuseError):
    pass


class SolverBreakdown(DefuseError):
    pass


class PicardDiverged(DefuseError):
    pass


class UnknownProblem(DefuseError):
    pass


class UnknownParam(DefuseError):
    pass


class NoExactSolution(DefuseError):
    pass


class NonPositiveError(DefuseError):
    pass


class UsageError(DefuseError):
    def __init__(self, message, flag=None):
        super().__init__(message)
        self.flag = flag


class IoError(DefuseError, OSError):
    pass
