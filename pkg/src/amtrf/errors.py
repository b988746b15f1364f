"""Exception hierarchy. Each class carries a short ``category`` used by the CLI."""


class AmtrfError(Exception):
    category = "error"


class ConfigError(AmtrfError, ValueError):
    category = "config"


class ParameterError(ConfigError):
    """Out-of-range numeric argument (rates, counts, geometry)."""


class ShapeError(AmtrfError, ValueError):
    category = "shape"


class EmptyInputError(ShapeError):
    pass


class MaskingError(AmtrfError, ValueError):
    """A query row with no permitted key; usually a latency/geometry misconfiguration."""

    category = "shape"


class LabelError(AmtrfError, ValueError):
    category = "shape"


class LifecycleError(AmtrfError, RuntimeError):
    category = "lifecycle"


class NumericError(AmtrfError, ArithmeticError):
    category = "numeric"


class MatrixIOError(AmtrfError, OSError):
    category = "io"
