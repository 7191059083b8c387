"""Exception types shared across the package.

Everything derives from FogsightError so callers can catch broadly; the
concrete classes also subclass the closest builtin so idiomatic
``except ValueError`` style code keeps working.
"""


class FogsightError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(FogsightError, ValueError):
    """Tensor/raster shapes are inconsistent with the operation."""


class ParameterError(FogsightError, ValueError):
    """A scalar argument is outside its valid range."""


class StateError(FogsightError, RuntimeError):
    """Operation called before the state it needs exists."""


class UsageError(FogsightError, RuntimeError):
    """API misuse, e.g. backward on a non-scalar."""


class ConstructionError(FogsightError, ValueError):
    """Network spec is internally inconsistent."""


class ConfigError(FogsightError, ValueError):
    """Bad run configuration (unknown key, unparseable value, missing input)."""


class DataError(FogsightError, RuntimeError):
    """Dataset layout problem (missing label, mismatched rasters)."""


class ImageIOError(FogsightError, IOError):
    """Malformed or unreadable image file.

    ``offset`` is the byte position where the file stopped making sense,
    when that could be determined.
    """

    def __init__(self, path, message, offset=None):
        self.path = str(path)
        self.offset = offset
        at = f" at byte {offset}" if offset is not None else ""
        super().__init__(f"{path}: {message}{at}")


class CheckpointError(FogsightError, IOError):
    """Checkpoint file does not follow the FOGW format."""
