"""Exception types raised across the package."""


class EpimatchError(Exception):
    """Base class for all package errors."""


class IdenticalPose(EpimatchError):
    """Two cameras share the same center, so the epipolar geometry is undefined."""


class DegenerateLine(EpimatchError):
    """A point maps to the null line (it is the epipole of the source view)."""


class EmptyRegion(EpimatchError):
    pass


class AllDegenerate(EpimatchError):
    """Every sampled point of a region produced a degenerate epipolar line."""


class MissingView(EpimatchError):
    pass


class EmptyLabelImage(EpimatchError):
    """A label image is missing, unreadable or has the wrong shape."""


class InvalidK(EpimatchError):
    pass


class AsymmetricInput(EpimatchError):
    pass


class EmptyCluster(EpimatchError):
    pass


class DimensionMismatch(EpimatchError):
    pass


class DegenerateGrid(EpimatchError):
    pass


class NodeMismatch(EpimatchError):
    pass


class EmptyCloud(EpimatchError):
    pass


class PlacementFailure(EpimatchError):
    """The synthetic generator could not place the requested objects."""
