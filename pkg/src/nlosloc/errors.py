"""Exception types shared across the package."""


class NlosLocError(Exception):
    """Base class for all package errors."""


class InvalidEnvironment(NlosLocError, ValueError):
    pass


class InvalidGeometry(NlosLocError, ValueError):
    pass


class DegenerateGeometry(NlosLocError, ValueError):
    pass


class NonFinite(NlosLocError, ValueError):
    pass


class TxInsideBuilding(NlosLocError, ValueError):
    pass


class RxInsideBuilding(NlosLocError, ValueError):
    pass


class NotPSD(NlosLocError, ValueError):
    pass


class EmptyCandidates(NlosLocError, ValueError):
    pass


class BudgetTooLarge(NlosLocError, ValueError):
    pass


class MaskOutsideMap(NlosLocError, ValueError):
    pass


class EmptyMeasurements(NlosLocError, ValueError):
    pass


class ShapeMismatch(NlosLocError, ValueError):
    pass


class BadTimestep(NlosLocError, ValueError):
    pass


class SingularSystem(NlosLocError, ArithmeticError):
    pass


class EmptyRegion(NlosLocError, ValueError):
    pass


class KTooLarge(NlosLocError, ValueError):
    pass


class EmptyEnsemble(NlosLocError, ValueError):
    pass


class TooFewMeasurements(NlosLocError, ValueError):
    pass


class NonConvergence(NlosLocError, RuntimeError):
    pass


class ZeroEnergyTruth(NlosLocError, ValueError):
    pass


class MapTooSmallForWindow(NlosLocError, ValueError):
    pass


class BadDimensions(NlosLocError, ValueError):
    pass


class UnreadableImage(NlosLocError, ValueError):
    pass


class PlacementFailure(NlosLocError, RuntimeError):
    pass


class ConfigInvalid(NlosLocError, ValueError):
    pass


class UpstreamArtifactMissing(NlosLocError, FileNotFoundError):
    pass
