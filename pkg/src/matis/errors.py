"""Exception types shared across the package.

Every error carries a short ``kind`` string; the CLI reports it in the
machine-readable error document written to stderr.
"""


class MatisError(Exception):
    kind = "Error"


class SumMismatch(MatisError, ValueError):
    kind = "SumMismatch"


class DimensionMismatch(MatisError, ValueError):
    kind = "DimensionMismatch"


class ShapeMismatch(MatisError, ValueError):
    kind = "ShapeMismatch"


class NonFiniteInput(MatisError, ValueError):
    kind = "NonFiniteInput"


class NonFiniteGradient(MatisError, ArithmeticError):
    kind = "NonFiniteGradient"


class NonFiniteLoss(MatisError, ArithmeticError):
    kind = "NonFiniteLoss"


class DivergenceDetected(MatisError, ArithmeticError):
    kind = "DivergenceDetected"


class EmptyMatrix(MatisError, ValueError):
    kind = "EmptyMatrix"


class FrameIdMismatch(MatisError, ValueError):
    kind = "FrameIdMismatch"


class PlacementFailure(MatisError, RuntimeError):
    kind = "PlacementFailure"


class ConfigInvalid(MatisError, ValueError):
    kind = "ConfigInvalid"


class MissingInput(MatisError, FileNotFoundError):
    kind = "MissingInput"


class VersionMismatch(MatisError, ValueError):
    kind = "VersionMismatch"
