"""Exception hierarchy.

Each family maps to one CLI exit code: configuration problems exit 2,
data problems exit 3, numeric failures exit 4.
"""


class CsmaeError(Exception):
    exit_code = 1


class ConfigError(CsmaeError, ValueError):
    exit_code = 2


class InfeasibleMaskError(ConfigError):
    """Disjoint masking requested with more than half of the patches masked."""


class DegenerateRatioError(ConfigError):
    """Masking ratio leaves no masked or no visible patches."""


class DataError(CsmaeError, ValueError):
    exit_code = 3


class GeometryError(DataError):
    """Image side is not square or not divisible by the patch size."""


class ShapeError(DataError):
    pass


class NumericError(CsmaeError, ArithmeticError):
    exit_code = 4
