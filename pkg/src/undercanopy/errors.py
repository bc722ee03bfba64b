"""Exception types shared across the package."""

from __future__ import annotations


class UndercanopyError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(UndercanopyError, ValueError):
    """A file could not be parsed. ``line`` is 1-based when known."""

    def __init__(self, message: str, path=None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class EmptyCloudError(UndercanopyError, ValueError):
    pass


class DegenerateFitError(UndercanopyError, ValueError):
    """Circle fit or alignment on a degenerate (collinear/coincident) point set."""


class PlacementError(UndercanopyError, RuntimeError):
    """Tree placement failed under the spacing floor after bounded retries."""


class NoPathError(UndercanopyError, RuntimeError):
    pass


class InfeasibleTrajectoryError(UndercanopyError, RuntimeError):
    """Optimized trajectory failed the clearance/dynamics post-check."""
