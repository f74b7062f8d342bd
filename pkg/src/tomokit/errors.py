"""Exception types raised across tomokit.

Every error carries enough context (op name, index, path, key) for the CLI to
print a one-line diagnostic.
"""


class TomokitError(Exception):
    """Base class for all tomokit failures."""


class GeometryError(TomokitError, ValueError):
    """Acquisition geometry or elevation grid is inconsistent."""


class SceneError(TomokitError, ValueError):
    """A scene model violates its invariants."""


class ShapeError(TomokitError, ValueError):
    """Operands with non-conforming shapes."""


class NonFiniteError(TomokitError, FloatingPointError):
    """A NaN or infinity appeared where finite values are required."""


class DivergenceError(TomokitError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, stage, epoch, batch, loss):
        self.stage = stage
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(
            f"{stage} diverged at epoch {epoch}, batch {batch} (loss={loss})")


class GradientCheckError(TomokitError, AssertionError):
    """Analytic and numeric gradients disagree."""


class ContainerError(TomokitError, IOError):
    """A binary container could not be read or written."""


class CheckpointError(ContainerError):
    """A parameter checkpoint is missing, malformed, or does not match the model."""


class ConfigError(TomokitError, ValueError):
    """Configuration file failed validation."""


class MetricError(TomokitError, ValueError):
    """Point-cloud metric inputs are invalid."""
