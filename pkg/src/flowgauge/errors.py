"""Exception types raised across flowgauge."""


class FlowGaugeError(Exception):
    """Base class for all flowgauge errors."""


class DimensionError(FlowGaugeError, ValueError):
    """Raster shapes are incompatible or too small."""


class NumericalError(FlowGaugeError, ArithmeticError):
    """A solver produced non-finite values."""


class EmptyResultError(FlowGaugeError, ValueError):
    """A filter removed every column."""


class StateError(FlowGaugeError, RuntimeError):
    """An operation was called on an object in an unusable state."""


class PipelineError(FlowGaugeError):
    """Wraps a failure inside one named pipeline stage."""

    def __init__(self, stage, message):
        self.stage = stage
        super().__init__(f"{stage}: {message}")
