"""Exception types shared across the pipeline."""


class PlaneMVSError(Exception):
    """Base class for all pipeline errors."""


class MissingFile(PlaneMVSError):
    pass


class MalformedCamera(PlaneMVSError):
    pass


class DimensionMismatch(PlaneMVSError):
    pass


class MalformedHeader(PlaneMVSError):
    pass


class DegenerateGeometry(PlaneMVSError):
    pass


class BehindCamera(PlaneMVSError):
    """A warped or projected point has non-positive depth in the target view."""


class RayParallelToPlane(PlaneMVSError):
    pass


class NoSources(PlaneMVSError):
    pass


class ConfigError(PlaneMVSError):
    pass


class EmptyCloud(PlaneMVSError):
    pass


class MissingArtifact(PlaneMVSError):
    pass
