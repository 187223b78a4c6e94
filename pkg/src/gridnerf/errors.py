"""Exception types shared across the package."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of an operation."""


class SceneLoadError(ValueError):
    """A dataset manifest or one of its images could not be loaded."""


class TraceFormatError(ValueError):
    """A trace file is malformed (bad magic, version, or truncated records)."""


class TrainingDiverged(RuntimeError):
    """The training loss became non-finite."""


class UnsupportedTableSize(ValueError):
    """A hash table is too large for any fusion mode of the modeled accelerator."""
