"""Exception hierarchy shared by all pipeline stages."""


class MsfmError(Exception):
    """Base class for every error raised by the package."""


class InvalidInputError(MsfmError, ValueError):
    pass


class DegenerateSegmentError(MsfmError, ValueError):
    pass


class LoadError(MsfmError):
    """Dataset or state file could not be read or failed validation."""


class StateVersionError(LoadError):
    pass


class ConfigError(MsfmError, ValueError):
    pass


class ExtractionError(MsfmError):
    """No usable peak on the Gaussian sphere."""


class NoDataError(MsfmError):
    pass


class InsufficientDataError(MsfmError):
    pass


class DegenerateWarpError(MsfmError):
    pass


class EmptyQuadError(MsfmError):
    pass


class UnderConstrainedError(MsfmError):
    pass


class BehindCameraError(MsfmError):
    pass


class NumericError(MsfmError, ArithmeticError):
    """Non-finite residual or failed factorization."""


class ExportError(MsfmError):
    pass


class StageError(MsfmError):
    """Wraps an error raised inside a named pipeline stage."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
