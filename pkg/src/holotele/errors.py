"""Exception hierarchy shared by all stages of the pipeline."""


class HoloteleError(Exception):
    """Base class for every error raised by this package."""


class DegenerateInput(HoloteleError, ValueError):
    """Point sets that cannot determine a rigid transform (collinear, too few)."""


class NoCorrespondences(HoloteleError, RuntimeError):
    """ICP found no pairs inside the distance gate."""


class BehindCamera(HoloteleError, ValueError):
    """A point projected with non-positive camera-frame depth."""


class NoConvergence(HoloteleError, RuntimeError):
    """Iterative undistortion did not converge."""


class DegenerateConfiguration(HoloteleError, ValueError):
    """Too few or coplanar 2D-3D correspondences for a projection-matrix estimate."""


class DivergedOrStalled(HoloteleError, RuntimeError):
    """Levenberg-Marquardt damping blew up without ever improving the cost."""


class EmptyObservations(HoloteleError, ValueError):
    pass


class InsufficientSharedFrames(HoloteleError, ValueError):
    def __init__(self, camera_id, shared, required=3):
        self.camera_id = camera_id
        self.shared = shared
        self.required = required
        super().__init__(
            f"camera {camera_id} shares {shared} wand frames with the reference "
            f"(need >= {required})"
        )


class CalibrationError(HoloteleError, RuntimeError):
    """Wraps a sub-stage failure with the camera that caused it."""

    def __init__(self, camera, stage, cause):
        self.camera = camera
        self.stage = stage
        self.cause = cause
        super().__init__(f"{stage} failed for camera {camera}: {cause}")


class InvalidCalibrationFile(HoloteleError, ValueError):
    pass


class DimensionMismatch(HoloteleError, ValueError):
    pass


class MissingFrame(HoloteleError, FileNotFoundError):
    pass


class UnknownCamera(HoloteleError, KeyError):
    pass


class LayoutOverflow(HoloteleError, ValueError):
    pass


class IoFailure(HoloteleError, OSError):
    pass


class ProtocolError(HoloteleError, ValueError):
    """Base class for wire decoding failures."""


class BadMagic(ProtocolError):
    pass


class BadVersion(ProtocolError):
    pass


class CrcMismatch(ProtocolError):
    pass


class Truncated(ProtocolError):
    pass


class UnknownType(ProtocolError):
    pass


class MalformedPayload(ProtocolError):
    pass


class ConnectionLost(HoloteleError, ConnectionError):
    pass


class SourceExhausted(HoloteleError):
    pass


class ZeroFrequency(UserWarning):
    """A class never occurs in the training masks; its weight is set to 0."""
