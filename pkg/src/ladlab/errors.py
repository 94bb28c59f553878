"""Exception taxonomy shared across the package.

UsageError and its subclasses map to CLI exit code 2 (caller mistake),
everything else to exit code 1 (runtime failure).
"""


class LadlabError(Exception):
    """Base class for all package errors."""


class UsageError(LadlabError):
    """Caller violated a documented precondition or interface contract."""


class ConfigError(UsageError):
    """Invalid configuration value or unknown key; message carries the key path."""


class FormatError(UsageError):
    """Malformed file content (datasets, checkpoints, IDX input)."""


class NumericalError(LadlabError):
    """Non-finite value produced by a forward/backward pass or training run."""


class StageError(LadlabError):
    """A pipeline stage failed; message names the stage."""
