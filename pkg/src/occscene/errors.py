"""Exception hierarchy shared across the package."""


class OccSceneError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(OccSceneError, ValueError):
    pass


class DomainError(OccSceneError, ValueError):
    pass


class NonFiniteValue(OccSceneError, ArithmeticError):
    pass


class NonFiniteLoss(NonFiniteValue):
    pass


class InvalidRange(OccSceneError, ValueError):
    pass


class IndexOutOfRange(OccSceneError, IndexError):
    pass


class ViewIndexOutOfRange(IndexOutOfRange):
    pass


class PlacementOverflow(OccSceneError):
    """Raised when a scene cannot hold the requested objects.

    ``achieved`` maps class id to the number of objects actually placed.
    """

    def __init__(self, message, achieved):
        super().__init__(message)
        self.achieved = dict(achieved)


class DegenerateCamera(OccSceneError, ValueError):
    pass


class FormatError(OccSceneError, ValueError):
    pass


class VersionMismatch(FormatError):
    pass


class ConfigHashMismatch(OccSceneError):
    pass


class InvalidConfig(OccSceneError, ValueError):
    pass


class InvalidSpec(OccSceneError, ValueError):
    pass


class UnknownToken(OccSceneError, ValueError):
    pass


class InsufficientSamples(OccSceneError, ValueError):
    pass


class NonPsd(OccSceneError, ValueError):
    pass
