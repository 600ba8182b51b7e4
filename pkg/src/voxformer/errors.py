class StructuralError(ValueError):
    """Volumes, maps or grids that do not line up with each other."""


class PreconditionError(ValueError):
    pass


class ResourceError(RuntimeError):
    pass


class DegenerateSceneError(RuntimeError):
    def __init__(self, level: int, message: str = ""):
        self.level = level
        super().__init__(message or f"degenerate scene: no active voxels at level {level}")
