"""Exception types shared across the package."""

import numpy as np


class SingularMatrixError(np.linalg.LinAlgError):
    """Cholesky factorization failed for every rung of the jitter ladder."""

    def __init__(self, message, jitter=None):
        super().__init__(message)
        self.jitter = jitter


class DegenerateColumnError(ValueError):
    """A column has zero spread and cannot be affinely rescaled."""

    def __init__(self, column, message=None):
        super().__init__(message or f"column {column} is constant")
        self.column = column


class CoverageError(ValueError):
    """A row or column of a masked matrix has no observed entries."""


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, index):
        super().__init__(f"non-finite gradient at coordinate {index}")
        self.index = index


class LineSearchError(RuntimeError):
    pass


class NaturalGradientError(RuntimeError):
    pass


class InferenceError(RuntimeError):
    pass


class EvaluationError(RuntimeError):
    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class ParseError(ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line
