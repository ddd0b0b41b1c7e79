"""Exception hierarchy shared by the library and the CLI."""


class ObjLidarError(Exception):
    """Base class for all package errors."""


class ConfigError(ObjLidarError, ValueError):
    """Invalid configuration constants (shapes, scales, schedule bounds)."""


class ValidationError(ObjLidarError, ValueError):
    """Input data violates an operation's preconditions."""


class UndefinedInputError(ValidationError):
    """A metric is undefined for the given input (empty cloud, zero vector)."""


class MissingEmbeddingError(ObjLidarError, KeyError):
    """A precomputed text embedding was requested but not found."""


class CheckpointError(ObjLidarError):
    """Missing, corrupt or incompatible parameter checkpoint."""


class CapacityError(ObjLidarError):
    """Object placement could not fit the requested number of boxes."""

    def __init__(self, message, achieved):
        super().__init__(message)
        self.achieved = achieved


class TrainingDivergence(ObjLidarError, RuntimeError):
    """Non-finite loss or gradient during training."""

    def __init__(self, step, param_name, loss):
        super().__init__(
            f"non-finite training state at step {step}: loss={loss!r}, "
            f"first non-finite gradient in {param_name!r}"
        )
        self.step = step
        self.param_name = param_name
        self.loss = loss
