"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: ConfigError -> 2, FormatError -> 3,
TrainingError / MetricError -> 4.
"""


class WvadError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(WvadError):
    """Invalid configuration or usage."""


class FormatError(WvadError):
    """Malformed file content or I/O failure."""


class TrainingError(WvadError):
    """Numerical failure during optimisation (non-finite loss, bad batch)."""


class MetricError(WvadError):
    """A metric is undefined for the given inputs (e.g. single-class labels)."""
