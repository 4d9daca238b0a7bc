"""Exception hierarchy shared by all gensart modules."""


class GensartError(Exception):
    """Base class for library errors."""


class ConfigurationError(GensartError, ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class UnsupportedCombinationError(ConfigurationError):
    """A valid option that cannot be combined with another (e.g. Lq with divergent beams)."""


class DomainError(GensartError, ValueError):
    """Input outside the mathematical domain of an operator."""


class IterationError(GensartError, RuntimeError):
    """A solver failed to converge or produced non-finite values (CLI exit code 3).

    Parameters
    ----------
    message : str
        Human readable description.
    iteration : int, optional
        Index of the outer Kaczmarz iteration, if known.
    residual : float, optional
        Last residual reported by the failing inner solver.
    """

    def __init__(self, message, iteration=None, residual=None):
        super().__init__(message)
        self.iteration = iteration
        self.residual = residual

    def __str__(self):
        msg = super().__str__()
        if self.iteration is not None:
            msg = f"iteration {self.iteration}: {msg}"
        if self.residual is not None:
            msg = f"{msg} (residual {self.residual:.3e})"
        return msg
