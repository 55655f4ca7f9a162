"""Exception types shared across the package."""


class DegenerateDataError(ValueError):
    """Raised when a fit or estimate is requested on data that cannot identify it
    (single-class labels, empty cells, no feature variation)."""


class DegenerateCellError(ValueError):
    """Raised when a monitoring or calibration cell has no eligible observations."""


class PositivityViolationError(ValueError):
    """Raised when a propensity used for inverse weighting is not strictly inside (0, 1)."""


class ConvergenceError(RuntimeError):
    """Raised when an iterative fit fails to converge; carries the last iterate."""

    def __init__(self, message: str, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate
