"""Exception types raised across the package."""


class HandWorldError(Exception):
    """Base class for all package errors."""


class NotARotation(HandWorldError, ValueError):
    pass


class BehindCamera(HandWorldError, ValueError):
    def __init__(self, message, indices=()):
        super().__init__(message)
        self.indices = tuple(int(i) for i in indices)


class AnchorInvisible(HandWorldError, ValueError):
    pass


class FrameTagMismatch(HandWorldError, ValueError):
    pass


class LengthMismatch(HandWorldError, ValueError):
    pass


class NoContext(HandWorldError, ValueError):
    pass


class WindowTooLong(HandWorldError, ValueError):
    pass


class ModelUninitialized(HandWorldError, RuntimeError):
    pass


class EmptyDataset(HandWorldError, ValueError):
    pass


class DivergedLoss(HandWorldError, FloatingPointError):
    pass


class EmptySampleSet(HandWorldError, ValueError):
    pass


class NonFiniteObjective(HandWorldError, FloatingPointError):
    pass


class EmptyCalibSet(HandWorldError, ValueError):
    pass


class PixelOutOfBounds(HandWorldError, IndexError):
    pass


class RankDeficient(HandWorldError, ArithmeticError):
    pass


class Diverged(HandWorldError, ArithmeticError):
    pass


class NonPositiveScale(HandWorldError, ValueError):
    pass


class Degenerate(HandWorldError, ValueError):
    pass


class ZeroDisplacement(HandWorldError, ValueError):
    pass


class TooShort(HandWorldError, ValueError):
    pass


class TooFewSamples(HandWorldError, ValueError):
    pass


class InvalidSpec(HandWorldError, ValueError):
    pass


class CheckpointError(HandWorldError, ValueError):
    pass
