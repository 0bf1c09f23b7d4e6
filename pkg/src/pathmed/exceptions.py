"""Exception types raised across the package."""


class PathmedError(Exception):
    """Base class for all package errors."""


class InputError(PathmedError, ValueError):
    """Malformed or inconsistent user input (bad ids, shapes, schemas)."""


class NumericalError(PathmedError, ArithmeticError):
    """A numerical routine failed (non-finite values, factorization failure)."""


class InvariantError(PathmedError, AssertionError):
    """An internal invariant was violated; indicates a bug or corrupt state."""


class DegenerateScoreError(NumericalError):
    """A pathway latent score carries no information (M^T Y is numerically zero)."""


class SamplerError(PathmedError, RuntimeError):
    """An MCMC update failed; carries the iteration index and step id."""

    def __init__(self, message: str, iteration: int, step: str):
        super().__init__(f"iteration {iteration}, step {step}: {message}")
        self.iteration = iteration
        self.step = step
