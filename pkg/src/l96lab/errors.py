"""Typed errors shared across the package."""


class L96Error(Exception):
    """Base class for every error this package raises deliberately."""


class IntegrationDiverged(L96Error):
    """Non-finite values appeared during integration or tendency evaluation."""

    def __init__(self, message: str, step: int | None = None, index: int | None = None):
        super().__init__(message)
        self.step = step
        self.index = index


class RangeEmpty(L96Error):
    """A sampling range has low >= high."""


class DegenerateColumn(L96Error):
    """A retained image column has max == min, so min-max scaling is undefined."""


class InsufficientData(L96Error):
    """A requested split would leave one side empty."""


class FormatError(L96Error):
    """A binary artifact has a bad magic, version, or truncated payload."""


class ChecksumError(L96Error):
    """A payload digest does not match its manifest."""


class ShapeMismatch(L96Error):
    """An input does not have the shape an operation requires."""


class NonPositiveSigma(L96Error):
    """A loss normalization standard deviation is not strictly positive."""


class StaleCache(L96Error):
    """A backward pass received a cache whose shapes disagree with the model."""


class SingularSystem(L96Error):
    """The regularized normal matrix failed to factor."""


class ZeroVariance(L96Error):
    """All truth values coincide for some parameter; r-squared is undefined."""


class EmptySplit(L96Error):
    """An operation needs a non-empty chunk split."""


class NonFiniteLoss(L96Error):
    """Training produced a NaN/Inf loss, gradient, or weight."""
