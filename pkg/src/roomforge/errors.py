"""Exception hierarchy shared across the pipeline."""


class RoomforgeError(Exception):
    """Base class for all roomforge errors."""


class ParseError(RoomforgeError):
    """Proxy file is not syntactically valid."""


class SchemaError(RoomforgeError):
    """Proxy file is valid syntax but violates the document schema."""


class ValidationError(RoomforgeError):
    """A domain invariant is violated; message names the offender."""


class CameraOutsideScene(RoomforgeError):
    """Camera rays miss the room shell for most pixels."""


class ResolutionMismatch(RoomforgeError):
    """Input images disagree on resolution."""


class NegativeDistance(RoomforgeError):
    """A distance map contains negative values."""


class MissingMask(RoomforgeError):
    """An instance visible in the frame has no object mask."""


class DivergenceError(RoomforgeError):
    """Alignment loss grew instead of shrinking; step size is bad."""


# complete_step surfaces alignment failures under this name.
AlignmentDiverged = DivergenceError


class OutOfBounds(RoomforgeError):
    """Too many samples fall outside the fusion volume."""


class EmptyVolume(RoomforgeError):
    """Fusion volume has no observations to extract a surface from."""


class EmptyResult(RoomforgeError):
    """Mesh cleaning removed everything; thresholds too aggressive."""


class MaskTooLarge(RoomforgeError):
    """Inpainting mask covers too much of the image."""


class NoValidViewpoint(RoomforgeError):
    """No completion viewpoint candidate survives filtering."""


class NoAttributedVertices(RoomforgeError):
    """Mesh carries no instance provenance to score."""


class BackendError(RoomforgeError):
    """A generative backend call failed; message carries the stage tag."""


class TransportError(BackendError):
    """HTTP transport failed after retries."""


class ProtocolError(BackendError):
    """Backend response violates the wire protocol."""


class TimeoutError(BackendError):  # noqa: A001 - mirrors the wire contract name
    """Backend call exceeded its deadline."""


class PrerequisiteMissing(RoomforgeError):
    """A pipeline stage was requested before its prerequisites ran."""
