"""Exception taxonomy. Every error raised by this package derives from SwinlabError."""


class SwinlabError(Exception):
    """Base class for all package errors."""


class ShapeError(SwinlabError):
    """Tensor extents incompatible with the requested operation."""


class ParameterError(SwinlabError):
    """A scalar argument (eps, window size, head count, ...) is out of range."""


class GeometryError(SwinlabError):
    """Spatial layout violation: divisibility, shift bounds, extent mismatch."""


class NumericsError(SwinlabError):
    """An operation produced NaN or Inf. Carries the op name for diagnosis."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite values produced by op '{op}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class UsageError(SwinlabError):
    """API misuse: backward on non-scalar, re-running a consumed tape, ..."""


class ConfigError(SwinlabError):
    """Bad run configuration: unknown key, missing file, malformed value."""


class ContractError(SwinlabError):
    """An input violated a documented precondition (e.g. unnormalized rows)."""


class OptimizerError(SwinlabError):
    """Optimizer state and parameter shapes disagree."""


class ScheduleError(SwinlabError):
    """Schedule queried outside its defined step range."""
