"""Exception types shared across the package."""


class RayCompleteError(Exception):
    """Base class for all package errors."""


class DegenerateRay(RayCompleteError):
    """A scan point coincides with the camera, so its ray has no direction."""


class ShapeMismatch(RayCompleteError):
    """Array shapes disagree with what the operation requires."""


class NegativeOffset(RayCompleteError):
    """An along-ray offset was negative where only non-negative values are legal."""


class EmptyCloud(RayCompleteError):
    """An operation that needs at least one point received an empty cloud."""


class EmptyInput(RayCompleteError):
    """A set encoder received zero elements."""


class NonScalarLoss(RayCompleteError):
    """Backpropagation was started from a non-scalar tensor."""


class InsufficientPoints(RayCompleteError):
    """A cloud has fewer points than a downsampling step needs."""


class CameraInside(RayCompleteError):
    """The scan camera lies inside the cloud's bounding sphere."""


class DegenerateScan(RayCompleteError):
    """Too few points survived occlusion for every camera attempt."""


class ParseError(RayCompleteError):
    """A point cloud file is malformed; the message carries the position."""


class UnsupportedFormat(RayCompleteError):
    """A point cloud file uses a format or property layout we do not read."""


class DatasetEmpty(RayCompleteError):
    """A training run was started on a dataset with no samples."""
