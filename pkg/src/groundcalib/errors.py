"""Exception hierarchy.

Every failure raised by the library derives from :class:`CalibrationError`
so callers can catch one type at the pipeline boundary.
"""


class CalibrationError(Exception):
    pass


# geometry
class NonPositiveDepth(CalibrationError):
    pass


class DegenerateRays(CalibrationError):
    pass


class NegativeDepth(CalibrationError):
    pass


class InsufficientPoints(CalibrationError):
    pass


class CollinearPoints(CalibrationError):
    pass


# ground extraction
class CameraFacingSky(CalibrationError):
    pass


class RayParallelToGround(CalibrationError):
    pass


class PointBehindCamera(CalibrationError):
    pass


class InsufficientMatches(CalibrationError):
    pass


class DecompositionFailed(CalibrationError):
    pass


class CollinearTriple(CalibrationError):
    pass


class RankDeficient(CalibrationError):
    pass


class NoGroundSeed(CalibrationError):
    pass


# optimizer
class PointAtInfinity(CalibrationError):
    pass


class SolverDiverged(CalibrationError):
    pass


class InsufficientFeatures(CalibrationError):
    pass


class SingularBlock(CalibrationError):
    pass


class DegenerateGeometry(CalibrationError):
    pass


class RankDeficientSum(CalibrationError):
    pass


# simulator / io
class EmptyScene(CalibrationError):
    pass


class ScenarioError(CalibrationError):
    pass


class SchemaVersionMismatch(ScenarioError):
    pass


class MalformedField(ScenarioError):
    def __init__(self, message, line=None, column=None, field=None):
        self.line = line
        self.column = column
        self.field = field
        where = []
        if field is not None:
            where.append(f"field {field!r}")
        if line is not None:
            where.append(f"line {line}, column {column}")
        suffix = f" ({'; '.join(where)})" if where else ""
        super().__init__(f"{message}{suffix}")


class ConfigError(CalibrationError):
    pass


# metrics
class EmptySet(CalibrationError):
    pass


class NoSecondCamera(CalibrationError):
    pass


class EmptyMatches(CalibrationError):
    pass
