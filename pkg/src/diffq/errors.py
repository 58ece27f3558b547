"""Exception hierarchy shared by every stage of the toolkit."""


class DiffQError(Exception):
    """Base class for all errors raised by diffq."""


class ConfigError(DiffQError):
    """Invalid or missing configuration (CLI exit code 2)."""


class NumericError(DiffQError):
    """A numeric failure such as a NaN loss (CLI exit code 3)."""


class ShapeMismatchError(DiffQError, ValueError):
    def __init__(self, layer, expected, got):
        self.layer = layer
        self.expected = tuple(expected)
        self.got = tuple(got)
        super().__init__(f"layer {layer!r}: expected shape {self.expected}, got {self.got}")


class TapeConsumedError(DiffQError, RuntimeError):
    """backward() was called twice on the same tape."""


class SegmentMismatchError(DiffQError, ValueError):
    """Two ParamVectors do not share a segment table."""


class TimestepError(DiffQError, ValueError):
    """Timestep out of range or sampler ordering violated."""


class TrainingDivergedError(NumericError):
    def __init__(self, iteration, loss):
        self.iteration = iteration
        self.loss = loss
        super().__init__(f"training diverged at iteration {iteration} (loss={loss})")


class CalibrationError(NumericError):
    def __init__(self, block, iteration, loss):
        self.block = block
        self.iteration = iteration
        self.loss = loss
        super().__init__(f"block {block} calibration produced loss={loss} at iteration {iteration}")


class MetaOptimizationError(NumericError):
    def __init__(self, iteration, loss):
        self.iteration = iteration
        self.loss = loss
        super().__init__(f"sample-weight optimization produced loss={loss} at iteration {iteration}")


class NonFiniteError(NumericError):
    """A NaN or Inf reached a loss boundary."""


class EmptyBatchError(DiffQError, ValueError):
    """An operation that needs samples received none."""


class CalibrationSetError(DiffQError, ValueError):
    """Invalid calibration-set construction request."""


class SplitError(CalibrationSetError):
    def __init__(self, timestep, fraction, count):
        self.timestep = timestep
        super().__init__(
            f"validation fraction {fraction} leaves timestep {timestep} with zero "
            f"validation samples (only {count} samples)"
        )


class GroupingError(CalibrationSetError):
    """Requested more groups than distinct timesteps, or groups are degenerate."""


class ConfigMismatchError(DiffQError, ValueError):
    def __init__(self, keys):
        self.keys = sorted(keys)
        super().__init__("runs differ in config keys: " + ", ".join(self.keys))
