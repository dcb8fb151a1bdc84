"""Exception types shared across the package."""


class DimensionMismatch(ValueError):
    """A parameter vector has the wrong length."""


class ShapeMismatch(ValueError):
    """Array arguments have incompatible shapes for the requested op."""


class PointAtInfinity(ValueError):
    """A homography sent a query point (numerically) onto the line at infinity."""


class NotInGraph(RuntimeError):
    """grad() was asked for an input the output does not depend on."""


class BadResolution(ValueError):
    """A network cannot be built at the requested raster resolution."""


class StageOrderViolation(RuntimeError):
    """Warp stages must be trained strictly in order."""


class VersionMismatch(RuntimeError):
    """Checkpoint format version is not supported by this build."""


class CorruptCheckpoint(RuntimeError):
    """Checkpoint payload failed structural or checksum validation."""


class SingularSystem(RuntimeError):
    """A linear solve met a numerically singular normal matrix."""


class ConfigError(ValueError):
    """A configuration field is missing, unknown, or out of range."""


class InfeasiblePlacement(ValueError):
    """Requested foreground placement cannot be represented in frame."""


class RetryExhausted(RuntimeError):
    """Rejection sampling hit its retry limit without a valid draw."""


class CubeNotVisible(RuntimeError):
    """The rendered object left the camera frustum or image bounds."""


class EmptyUnion(ValueError):
    """IoU is undefined because both masks are empty."""
