"""Exception hierarchy shared by every module of the package."""


class RobustQError(Exception):
    """Base class for all package errors."""


class ConfigurationError(RobustQError, ValueError):
    """Invalid inputs, shapes, or configuration values."""


class SingularityError(RobustQError, ArithmeticError):
    """A submodel Hessian is (numerically) singular.

    Parameters
    ----------
    message : str
        Human readable description.
    model : tuple of int, optional
        The offending 0-based model indices.
    eigenvalue : float, optional
        Smallest eigenvalue of the submodel Hessian.
    stage : int, optional
        Stage the failure occurred in.
    """

    def __init__(self, message, model=None, eigenvalue=None, stage=None):
        super().__init__(message)
        self.model = model
        self.eigenvalue = eigenvalue
        self.stage = stage


class NumericalError(RobustQError, ArithmeticError):
    """A numerical postcondition was violated (residuals, rejection rates)."""


class UnsupportedScenarioError(RobustQError, ValueError):
    """Ground truth requested for a scenario where it is not identified."""


class ReplicationError(RobustQError):
    """A simulation replication failed; ``rep`` and ``seed`` allow replay."""

    def __init__(self, message, rep=None, seed=None):
        super().__init__(message)
        self.rep = rep
        self.seed = seed
