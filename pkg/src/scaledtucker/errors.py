"""Exception types raised across the package."""


class TuckerError(Exception):
    """Base class for all package errors."""


class DimensionError(TuckerError, ValueError):
    """Array shapes are inconsistent with each other or with declared dims."""


class RankError(TuckerError, ValueError):
    """Requested multilinear rank exceeds what the tensor dimensions allow."""


class ParameterError(TuckerError, ValueError):
    """A scalar parameter is outside its admissible range."""


class ContractError(TuckerError, ValueError):
    """An input violates a documented precondition (e.g. orthonormality)."""


class DegenerateRankError(TuckerError):
    """A matricization has fewer than r_k nonzero singular values."""

    def __init__(self, mode: int, sigma: float, message: str | None = None):
        self.mode = mode
        self.sigma = sigma
        super().__init__(message or f"mode-{mode} matricization is rank deficient (sigma_r = {sigma:.3e})")


class IllConditionedIterate(TuckerError):
    """A preconditioner Gram is numerically singular at the current iterate."""

    def __init__(self, mode: int, which: str = "breve"):
        self.mode = mode
        self.which = which
        super().__init__(f"{which} Gram of mode {mode} is singular; the iterate has collapsed in rank")


class InitError(TuckerError):
    """Spectral initialization could not be computed."""


class FormatError(TuckerError, ValueError):
    """A binary file does not follow its declared layout."""
