"""Exception hierarchy.

Each class carries a short ``code`` used by the command line for its
``ERROR[<code>]`` prefix and an exit status.
"""


class ScatterForgeError(Exception):
    code = "error"
    exit_status = 2


class ConfigError(ScatterForgeError, ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    code = "config"

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class RecipeError(ScatterForgeError, ValueError):
    code = "recipe"


class GenerationError(ScatterForgeError, RuntimeError):
    code = "generation"


class FormatError(ScatterForgeError, ValueError):
    """Malformed on-disk artifact.  ``offset`` is the byte (or line) position."""

    code = "format"

    def __init__(self, message: str, offset: int | None = None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)


class DimensionError(ScatterForgeError, ValueError):
    code = "dimension"


class UndefinedAPError(ScatterForgeError, ValueError):
    code = "undefined-ap"


class SingleRunError(ScatterForgeError, ValueError):
    code = "single-run"


class TrainingError(ScatterForgeError, RuntimeError):
    """Numeric failure during optimization (loss NaN/inf)."""

    code = "numeric"
    exit_status = 3

    def __init__(self, message: str, epoch: int | None = None):
        self.epoch = epoch
        super().__init__(message if epoch is None else f"{message} (epoch {epoch})")
