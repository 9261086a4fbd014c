"""Exception hierarchy shared across the pipeline.

Every failure the pipeline raises on purpose derives from PipelineError so
callers (and the CLI exit-code mapping) can tell our errors from bugs.
"""


class PipelineError(Exception):
    """Base class for all errors raised deliberately by this package."""


class ConfigError(PipelineError):
    """Bad configuration: unknown keys, unparsable values, invalid ranges."""


class DataError(PipelineError):
    """Malformed input data: manifests, images, model files, masks."""


class BackendError(PipelineError):
    """A model backend failed or returned something unusable."""


class ProtocolError(BackendError):
    """A wire message violated the request/response schema."""


class CheckpointError(PipelineError):
    """A checkpoint could not be used to resume the requested run."""


class StorageError(PipelineError):
    """Reading or writing a pipeline file failed at the OS level."""
