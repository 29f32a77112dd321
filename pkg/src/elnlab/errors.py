"""Exception types shared across the package."""


class ElnLabError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(ElnLabError):
    """Invalid configuration value or combination (names the offending key)."""


class IngestionError(ElnLabError):
    """Folder dataset could not be ingested (names the offending stem)."""


class CheckpointError(ElnLabError):
    """Checkpoint file is malformed or incompatible with the current config."""


class PrerequisiteError(ElnLabError):
    """A required artifact (e.g. an earlier-stage checkpoint) is missing."""
