"""Exception hierarchy shared by all distfilt modules."""


class DistFiltError(Exception):
    """Base class for every error raised by distfilt."""


class DisconnectedGraph(DistFiltError, ValueError):
    pass


class IndexOutOfRange(DistFiltError, IndexError):
    pass


class GenerationFailed(DistFiltError, RuntimeError):
    pass


class EigenSolverFailure(DistFiltError, RuntimeError):
    pass


class DimensionMismatch(DistFiltError, ValueError):
    pass


class ShapeMismatch(DistFiltError, ValueError):
    pass


class SingularInnovationCovariance(DistFiltError, ArithmeticError):
    pass


class InconsistentPrior(DistFiltError, ValueError):
    pass


class WindowTooLong(DistFiltError, ValueError):
    pass


class FitFailed(DistFiltError, RuntimeError):
    pass


class ScenarioInvalid(DistFiltError, ValueError):
    pass


class UnknownParameter(DistFiltError, KeyError):
    pass


class FormatError(DistFiltError, ValueError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


class IoFailure(DistFiltError, OSError):
    pass
