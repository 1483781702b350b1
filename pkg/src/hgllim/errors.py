"""Exception types raised across the package."""


class HGLLiMError(Exception):
    """Base class for all package errors."""


class ConfigError(HGLLiMError, ValueError):
    pass


class DegenerateCovariance(HGLLiMError, ValueError):
    def __init__(self, component=None, message="covariance is not positive definite"):
        self.component = component
        where = "" if component is None else f" (component {component})"
        super().__init__(message + where)


class NonFinite(HGLLiMError, FloatingPointError):
    pass


class EmptyComponent(HGLLiMError):
    def __init__(self, component):
        self.component = component
        super().__init__(f"component {component} has vanishing responsibility mass")


class InvalidLabel(HGLLiMError, ValueError):
    pass


class ParseError(HGLLiMError, ValueError):
    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        super().__init__(message + (f" at {', '.join(loc)}" if loc else ""))


class DimensionMismatch(HGLLiMError, ValueError):
    pass


class ConstantColumn(HGLLiMError, ValueError):
    pass


class ConstantTruth(HGLLiMError, ValueError):
    pass


class ZeroVariance(HGLLiMError, ValueError):
    pass


class RegionTooSmall(HGLLiMError, ValueError):
    pass


class InsufficientNeighbors(HGLLiMError, ValueError):
    pass
