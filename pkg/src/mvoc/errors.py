"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: configuration problems exit
with 2, I/O and container-format problems with 3, numeric degeneracies
with 4.
"""


class MvocError(Exception):
    """Base class for package-specific errors."""


class ConfigError(MvocError):
    """Invalid parameters, shapes, ranges, or job/config structure."""


class IOFormatError(MvocError):
    """Missing or malformed on-disk artifacts (.vten files, caches, sidecars)."""


class NumericError(MvocError):
    """Numerically degenerate request: singular transform, invalid noise
    scale, undefined metric, non-finite data."""
