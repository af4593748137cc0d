"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
anything else raised inside a stage -> 4.
"""


class ShapeError(ValueError):
    """Operands have incompatible shapes or violate a divisibility constraint."""


class StateError(RuntimeError):
    """Operation invoked on an object in the wrong lifecycle state."""


class ConfigError(ValueError):
    """Invalid configuration value or combination of values."""


class DataError(ValueError):
    """Invalid dataset content, metric input, or missing prerequisite artifact."""


class StageError(RuntimeError):
    """A pipeline stage failed at run time."""
