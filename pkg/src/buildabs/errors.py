"""Exception hierarchy shared by all modules."""


class BuildAbsError(Exception):
    pass


class EmptyCloud(BuildAbsError, ValueError):
    pass


class TooFewPoints(BuildAbsError, ValueError):
    pass


class EmptyMesh(BuildAbsError, ValueError):
    pass


class MissingNormals(BuildAbsError, ValueError):
    pass


class EmptyGrid(BuildAbsError, ValueError):
    pass


class ResolutionTooLarge(BuildAbsError, ValueError):
    pass


class SourceTooSmall(BuildAbsError, ValueError):
    pass


class NonTriangulated(BuildAbsError, ValueError):
    pass


class OutOfRangeCoordinate(BuildAbsError, ValueError):
    pass


class NaNVertex(BuildAbsError, ValueError):
    pass


class MalformedSequence(BuildAbsError, ValueError):
    pass


class VocabularyOverflow(BuildAbsError, ValueError):
    pass


class ShapeMismatch(BuildAbsError, ValueError):
    pass


class ResolutionMismatch(BuildAbsError, ValueError):
    pass


class KindMismatch(BuildAbsError, ValueError):
    pass


class StepOutOfRange(BuildAbsError, ValueError):
    pass


class AllEmptyBalls(BuildAbsError, ValueError):
    pass


class FormatError(BuildAbsError, ValueError):
    pass


class StageFailure(BuildAbsError, RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
