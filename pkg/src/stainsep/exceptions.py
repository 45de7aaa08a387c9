"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage/config problems exit 1, data
problems exit 2, numerical failures exit 3.
"""


class StainSepError(Exception):
    """Base class for all package errors."""


class ParameterError(StainSepError, ValueError):
    """A caller-supplied parameter is out of contract."""


class DimensionError(ParameterError):
    """Array shapes do not line up (image sizes, channel counts, N)."""


class SingularSpectraError(StainSepError, ValueError):
    """Spectrum matrix is rank deficient; names the offending columns."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class DegenerateInputError(StainSepError, ValueError):
    """Input carries no usable signal (e.g. an all-zero image)."""


class DataError(StainSepError):
    """Dataset on disk is unreadable or structurally broken."""


class ConfigError(StainSepError):
    """A run configuration is invalid or inconsistent."""


class CheckpointMismatchError(ConfigError):
    """Checkpoint was produced under a different configuration."""


class NumericalError(StainSepError, ArithmeticError):
    """A training step produced a non-finite loss; carries diagnostics."""

    def __init__(self, message, iteration=None, batch_ids=()):
        super().__init__(message)
        self.iteration = iteration
        self.batch_ids = tuple(batch_ids)
