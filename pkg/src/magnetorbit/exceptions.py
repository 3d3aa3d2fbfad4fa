"""Exception hierarchy shared by all modules."""


class MagnetorbitError(Exception):
    """Base class for numerical failures (CLI exit code 3)."""


class DegenerateLattice(MagnetorbitError, ValueError):
    pass


class EmptyLevelSet(MagnetorbitError):
    pass


class SeedOffSurface(MagnetorbitError, ValueError):
    pass


class SaddleEncounter(MagnetorbitError):
    """Raised when a trace runs into a singular point of the planar flow.

    The partial trajectory is attached as ``trajectory``.
    """

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


class NewtonNoConvergence(MagnetorbitError):
    pass


class OddEuler(MagnetorbitError):
    pass


class TooShort(MagnetorbitError):
    pass


class NoIntegralPlane(MagnetorbitError):
    def __init__(self, message, best=None, angle=None):
        super().__init__(message)
        self.best = best
        self.angle = angle


class DegenerateMoments(MagnetorbitError):
    def __init__(self, message, directions=None, ratio=None):
        super().__init__(message)
        self.directions = directions
        self.ratio = ratio


class BadFit(MagnetorbitError):
    def __init__(self, message, slope=None, residual=None):
        super().__init__(message)
        self.slope = slope
        self.residual = residual


class InsufficientHistory(MagnetorbitError):
    pass


class NotPeriodic(MagnetorbitError):
    pass


class EmptySurface(MagnetorbitError):
    pass


class NoCloseApproaches(MagnetorbitError):
    pass


class CriticalPointEncounter(SaddleEncounter):
    pass


class SeedOffLevel(SeedOffSurface):
    pass


class SchemaError(ValueError):
    """Config does not match the schema; ``path`` names the offending key."""

    def __init__(self, message, path=()):
        super().__init__(message)
        self.path = tuple(path)
