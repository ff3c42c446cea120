"""Exception taxonomy shared across the package.

The CLI maps these onto exit-code categories: configuration problems,
data/file problems, and numeric failures.
"""


class RadeFusionError(Exception):
    """Base class for all package errors."""


class ConfigError(RadeFusionError):
    """Invalid or inconsistent configuration (shapes, modes, missing keys)."""


class DataError(RadeFusionError):
    """Problems reading or writing datasets and frames."""


class HeaderError(DataError):
    """Frame file header is malformed or unparseable."""


class DimensionError(DataError):
    """Frame header declares inconsistent or non-positive dimensions."""


class TruncationError(DataError):
    """Frame payload ends before all declared tensors were read."""


class ManifestError(DataError):
    """Dataset manifest missing, malformed, or referencing missing files."""


class GenerationError(DataError):
    """Synthetic scene generation failed (e.g. placement retries exhausted)."""


class CheckpointError(RadeFusionError):
    """Checkpoint archive malformed or incompatible with the model."""


class NumericError(RadeFusionError):
    """Numeric failure during training or inference (NaN/Inf loss)."""
