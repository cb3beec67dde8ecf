class CpcLabError(Exception):
    """Base class for errors raised by cpclab."""


class ParameterError(CpcLabError, ValueError):
    """An argument is outside its documented domain."""


class DatasetError(CpcLabError, ValueError):
    """A dataset file could not be parsed.

    ``row`` is the 1-based line number of the offending row, when known.
    """

    def __init__(self, message, row=None):
        if row is not None:
            message = "row {}: {}".format(row, message)
        super(DatasetError, self).__init__(message)
        self.row = row


class NumericalError(CpcLabError, ArithmeticError):
    """A loss or a gradient stopped being finite."""


class StaleCacheError(CpcLabError, RuntimeError):
    """A forward cache was used after the parameters it was computed with changed."""


class DegenerateFitError(CpcLabError, ValueError):
    """A posterior was requested from a fit flagged degenerate."""


class EmptyPartitionError(CpcLabError, RuntimeError):
    """Stage 2 cannot train without labeled samples."""


class TrainingAborted(CpcLabError, RuntimeError):
    """An epoch aborted. ``records`` holds the log written up to that point."""

    def __init__(self, message, records=()):
        super(TrainingAborted, self).__init__(message)
        self.records = list(records)


class SpecError(CpcLabError, ValueError):
    """An experiment spec or override failed validation.

    ``field`` is the dotted path of the first offending field.
    """

    def __init__(self, message, field=None):
        super(SpecError, self).__init__(message)
        self.field = field


class CorruptMetricsError(CpcLabError, ValueError):
    """No readable record was found in the metrics streams handed to a report."""
