"""Exception types with machine-readable categories for the CLI exit contract."""


class PipelineError(Exception):
    """Base for failures that map to a CLI error category."""

    category = "internal"


class FormatError(PipelineError):
    """Malformed input file (wrong size, bad field, undecodable record)."""

    category = "bad-format"


class ConfigError(PipelineError):
    """Invalid or inconsistent configuration."""

    category = "bad-config"


class DigestError(PipelineError):
    """Content or configuration digest mismatch."""

    category = "digest-mismatch"


class DatasetError(PipelineError):
    """Dataset missing or unreadable."""

    category = "missing-dataset"


class TaskError(PipelineError):
    """Checkpoint used with the wrong task."""

    category = "task-mismatch"
