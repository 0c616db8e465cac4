"""Exception types shared across the package."""


class WBMIAError(Exception):
    """Base class for all errors raised by wbmia."""


class DimensionError(WBMIAError, ValueError):
    """Array shapes do not compose."""


class NumericError(WBMIAError, ArithmeticError):
    """A computation produced NaN or Inf."""


class ArgumentError(WBMIAError, ValueError):
    """An argument violates a documented precondition."""


class FormatError(WBMIAError, ValueError):
    """A file does not follow its declared format."""


class DegenerateError(WBMIAError, ValueError):
    """Input admits no meaningful answer (e.g. clustering a constant list)."""


class ConfigError(WBMIAError, ValueError):
    """An experiment configuration is invalid."""


class StageError(WBMIAError):
    """An experiment stage failed; ``stage`` names it and ``cause`` holds the original error."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
