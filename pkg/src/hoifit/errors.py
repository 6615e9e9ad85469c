"""Exception types shared across the package."""


class HoifitError(Exception):
    """Base class for all package errors."""


class DegenerateConfiguration(HoifitError):
    """Point set too small or collinear for a similarity fit."""


class NotWatertight(HoifitError):
    """Operation requires a mesh flagged watertight."""


class EmptyMesh(HoifitError):
    pass


class TooShort(HoifitError):
    """Sequence has fewer frames than the operation needs."""


class NoValidFrames(HoifitError):
    pass


class EmptyInteractionSet(HoifitError):
    pass


class NoInteractionFrames(HoifitError):
    pass


class GraspRejected(HoifitError):
    """A candidate grasp failed the contact-validity check."""


class NonFiniteLoss(HoifitError):
    def __init__(self, batch_index: int):
        super().__init__(f"non-finite loss at batch {batch_index}")
        self.batch_index = batch_index


class ModelUntrained(HoifitError):
    pass


class ShapeMismatch(HoifitError):
    pass


class MissingMask(HoifitError):
    def __init__(self, frames):
        super().__init__(f"missing masks for frames {sorted(frames)}")
        self.frames = sorted(frames)


class MissingObservation(HoifitError):
    def __init__(self, frames):
        super().__init__(f"missing observations for frames {sorted(frames)}")
        self.frames = sorted(frames)


class InvalidScript(HoifitError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class MissingStageOutput(HoifitError):
    pass


class ConfigError(HoifitError):
    """Unknown key or invalid value in a run configuration."""
