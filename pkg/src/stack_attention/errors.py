"""Exception types shared across the package."""


class StackAttentionError(Exception):
    pass


class DimensionError(StackAttentionError, ValueError):
    """Tensor extents do not agree."""


class ParameterError(StackAttentionError, ValueError):
    """A hyperparameter or configuration value is out of range."""


class ContractError(StackAttentionError, RuntimeError):
    """An operation was called in a state its contract forbids."""


class InputError(StackAttentionError, ValueError):
    """Malformed user input, e.g. an out-of-vocabulary token."""


class TrainingError(StackAttentionError, RuntimeError):
    """Training diverged (e.g. a non-finite loss)."""
