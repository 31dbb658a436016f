"""Exception types shared across the package."""


class GanfpError(Exception):
    """Base class for all package-specific failures."""


class ConfigError(GanfpError):
    """Bad configuration file or flag value (CLI exit code 2)."""


class DataError(GanfpError):
    """Dataset ingestion failure."""


class FormatError(GanfpError):
    """Malformed, corrupted, or mistyped serialized artifact."""


class RegistryError(GanfpError):
    """Registry journal or record failure."""


class RegistryFullError(RegistryError):
    """Fingerprint issuance exhausted resampling attempts: at the active
    match threshold the space cannot hold another well-separated record."""


class TrainingDivergedError(GanfpError):
    """A loss term went non-finite during training."""
