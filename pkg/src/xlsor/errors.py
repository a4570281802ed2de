"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(RuntimeError):
    """A call violated an API precondition (e.g. backward on a non-scalar)."""


class ConfigError(ValueError):
    """Invalid model, training or run configuration."""


class DataError(ValueError):
    """Invalid input data: empty sets, non-binary masks, bad files."""


class UndefinedMetricError(ValueError):
    """A metric has no value for the given inputs (e.g. AVD with an empty mask)."""


class StateError(RuntimeError):
    """An object is not in a usable state (e.g. an untrained segmentor)."""
