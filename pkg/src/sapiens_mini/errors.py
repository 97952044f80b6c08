"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration, raised before any compute."""


class UsageError(RuntimeError):
    """An operation was called with inputs its contract does not allow."""


class DegenerateInputError(ValueError):
    """Inputs are well-formed but too small or empty for the operation."""


class CheckpointMismatchError(RuntimeError):
    """A checkpoint was written for a different configuration."""


class NaNGradientError(FloatingPointError):
    """A non-finite gradient reached the optimizer."""


class FrozenWeightDriftError(RuntimeError):
    """Weights that were declared frozen changed during training."""
