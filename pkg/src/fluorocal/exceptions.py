"""Exception hierarchy shared by the calibration modules."""


class FluorocalError(Exception):
    """Base class for all package errors."""


class DepthDegenerate(FluorocalError):
    """A target lies on (or too close to) the perspective-centre plane."""


class ParseError(FluorocalError):
    """Malformed input file; ``line`` carries the 1-based line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(FluorocalError):
    """Input parsed fine but violates a data-model invariant."""


class InfeasibleSpacing(FluorocalError):
    pass


class NonPositiveVariance(FluorocalError):
    pass


class SingularNormalMatrix(FluorocalError):
    """Normal matrix is rank deficient (datum defect or weak geometry)."""


class DivergenceError(FluorocalError):
    pass


class InsufficientSamples(FluorocalError):
    pass


class GridTooLarge(FluorocalError):
    pass


class NonConvergence(FluorocalError):
    """Outer self-calibration loop hit its iteration cap or stopped on a cost rise.

    The partially converged result is attached as ``result`` so callers can
    still write it out.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class IdMismatch(FluorocalError):
    pass
