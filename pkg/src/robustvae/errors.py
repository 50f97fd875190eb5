"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
MissingArtifactError -> 3, NumericError -> 4.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class MissingArtifactError(FileNotFoundError):
    """A referenced checkpoint / dataset / campaign artifact does not exist."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


class IntegrityError(RuntimeError):
    """Stored bytes fail checksum or length validation."""


class VersionError(RuntimeError):
    """Persisted artifact has an unsupported format version."""
