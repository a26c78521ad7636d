"""
Error types raised by the solver.
Everything derives from BsdeError so the CLI can map failures to exit codes.
"""


class BsdeError(Exception):
    """Base class for solver errors."""


class ConfigError(BsdeError, ValueError):
    """Experiment configuration could not be parsed or validated."""


class GridError(BsdeError, ValueError):
    """Partition and exercise schedule do not line up."""


class CorrelationError(BsdeError, ValueError):
    """Correlation matrix is not a valid (PSD, unit-diagonal) correlation."""


class ShapeError(BsdeError, ValueError):
    """Array or control-stack shapes do not match."""


class ReferenceUnavailable(BsdeError, ValueError):
    """No analytic reference exists for the requested payoff."""


class TrainingAborted(BsdeError, RuntimeError):
    """Training produced a non-finite quantity."""

    def __init__(self, iteration: int, quantity: str, detail: str = ""):
        self.iteration = iteration
        self.quantity = quantity
        message = f"training aborted at iteration {iteration}: non-finite {quantity}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)
