"""Exception types shared across the package."""


class WeightedNormalsError(Exception):
    """Base class for all package errors."""


class InvalidInput(WeightedNormalsError, ValueError):
    pass


class ShapeError(WeightedNormalsError, ValueError):
    pass


class NumericError(WeightedNormalsError, ArithmeticError):
    pass


class DegeneratePrediction(WeightedNormalsError, ArithmeticError):
    """A predicted vector had zero length and cannot be normalized."""


class DegenerateNeighborhood(WeightedNormalsError, ArithmeticError):
    """A neighborhood is rank deficient (e.g. collinear points)."""


class ParseError(WeightedNormalsError, ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


class ConsistencyError(WeightedNormalsError, ValueError):
    pass


class Diverged(WeightedNormalsError, ArithmeticError):
    """Training produced a non-finite loss.

    ``checkpoint`` holds the last state whose loss was finite.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
