"""Exception hierarchy shared by the solvers and reduction routines."""


class GlemorError(Exception):
    """Base class for all package errors."""


class SingularOperatorError(GlemorError, ValueError):
    """Raised when a matrix that must be inverted is numerically singular."""


class UnstableModeError(GlemorError, ValueError):
    """Raised when a matrix required to be Hurwitz has an eigenvalue with
    nonnegative real part."""


class DenseCapError(GlemorError, ValueError):
    """Raised when a dense kernel is asked to work beyond its size cap."""


class ClusterSplitError(GlemorError, ValueError):
    """Raised when a truncation order would split a cluster of (numerically)
    equal singular values.

    Attributes
    ----------
    admissible : list of int
        Orders that do not split a cluster.
    """

    def __init__(self, message, admissible=()):
        super().__init__(message)
        self.admissible = list(admissible)


class InapplicableError(GlemorError, ValueError):
    """Raised when the hypotheses of a correction scheme are violated."""


class ConvergenceError(GlemorError, RuntimeError):
    """Raised when an iteration fails to reach its tolerance.

    Attributes
    ----------
    best : object
        The best iterate found before giving up (type depends on caller).
    estimate : float or None
        Last scalar estimate, when the iteration produces one.
    """

    def __init__(self, message, best=None, estimate=None):
        super().__init__(message)
        self.best = best
        self.estimate = estimate
