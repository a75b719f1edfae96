"""Exception hierarchy shared across the toolkit."""


class IFNetError(Exception):
    """Base class for every error raised by ifnet."""


class ShapeMismatch(IFNetError):
    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        desc = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class BackwardBeforeForward(IFNetError):
    pass


class NonScalarOutput(IFNetError):
    pass


class SkippedNondifferentiable(IFNetError):
    """Raised by grad_check when the point sits on a kink of max(., 0), min or max."""


class InvalidConfig(IFNetError):
    pass


class WrongPatchSize(IFNetError):
    pass


class DimMismatch(IFNetError):
    pass


class EmptyRow(IFNetError):
    pass


class BatchTooSmall(IFNetError):
    pass


class DuplicateTrackIds(IFNetError):
    pass


class NegativeDistance(IFNetError):
    pass


class EmptyBatch(IFNetError):
    pass


class InsufficientTracks(IFNetError):
    pass


class ImageTooSmall(IFNetError):
    pass


class MalformedImport(IFNetError):
    pass


class OutOfBounds(IFNetError):
    pass


class InvalidParams(IFNetError):
    pass


class CorruptManifest(IFNetError):
    pass


class MissingPatchFile(IFNetError):
    def __init__(self, path):
        self.path = str(path)
        super().__init__(f"patch file not found: {self.path}")


class NoPositives(IFNetError):
    pass


class CheckpointMismatch(IFNetError):
    pass
