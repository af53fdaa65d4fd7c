"""Error taxonomy shared across the package.

The CLI maps these onto exit codes: configuration problems exit 1,
data problems exit 2, numeric failures exit 3.
"""


class SerkitError(Exception):
    """Base class for all package errors."""


class ConfigError(SerkitError):
    """Invalid configuration: bad hyperparameter, shape setup, unknown key."""


class ShapeError(ConfigError):
    """Tensor shape mismatch; message names the offending op or tensor."""


class DataError(SerkitError):
    """Broken or missing input data: manifests, feature files, CSVs."""


class NumericError(SerkitError):
    """Non-finite value produced during computation."""
