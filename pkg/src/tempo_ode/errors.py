"""Exception hierarchy shared by every tempo_ode subsystem."""


class TempoOdeError(Exception):
    """Base class for all library errors."""


class ShapeMismatchError(TempoOdeError):
    pass


class NonFiniteError(TempoOdeError):
    """An operation produced NaN or Inf."""


class NotScalarError(TempoOdeError):
    pass


class NotTrackedError(TempoOdeError):
    pass


class EmptyReductionError(TempoOdeError):
    pass


class MaxStepsExceededError(TempoOdeError):
    pass


class StepUnderflowError(TempoOdeError):
    pass


class NonMonotoneTimesError(TempoOdeError):
    pass


class EmptySeriesError(TempoOdeError):
    pass


class NoTaskHeadError(TempoOdeError):
    pass


class InvalidSpecError(TempoOdeError):
    pass


class ParseError(TempoOdeError):
    def __init__(self, message, row=None, col=None):
        if row is not None:
            message = f"{message} (row {row}" + (f", column {col})" if col is not None else ")")
        super().__init__(message)
        self.row = row
        self.col = col


class DuplicateTimeError(TempoOdeError):
    pass


class EmptyMaskError(TempoOdeError):
    pass


class EmptyHeldoutError(TempoOdeError):
    pass


class SingleClassError(TempoOdeError):
    pass


class NonFiniteGradError(TempoOdeError):
    pass


class ConfigError(TempoOdeError):
    """Invalid or unknown configuration content (usage error, exit code 2)."""


class IncompatibleCheckpointError(TempoOdeError):
    pass


class SampleNotFoundError(TempoOdeError):
    pass
