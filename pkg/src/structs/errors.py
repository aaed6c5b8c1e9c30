"""Exception hierarchy shared by every module of the package."""


class StructsError(Exception):
    """Base class for all errors raised by :mod:`structs`."""


class NotDifferentiable(StructsError):
    pass


class BadTheta(StructsError):
    pass


class BadIndex(StructsError):
    pass


class NotLinear(StructsError):
    pass


class NotSymmetric(StructsError):
    pass


class NotPds(StructsError):
    pass


class NotIdentifiable(StructsError):
    pass


class BadDim(StructsError):
    pass


class NoRoot(StructsError):
    pass


class Degenerate(StructsError):
    pass


class NoFeasibleScale(StructsError):
    pass


class RankDeficient(StructsError):
    pass


class NonInvertible(StructsError):
    pass


class BadConstants(StructsError):
    pass


class InputError(StructsError):
    """Malformed user input (data files, configs, command line values)."""


class NoSolution(StructsError):
    """No subsampling candidate converged.

    The best partial fit, if any, is attached as ``best``.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class HarnessWarning(UserWarning):
    """Too many failed replications in a Monte Carlo run."""
