"""Exception hierarchy shared across the package.

All errors raised on bad inputs derive from :class:`RegionMimError` so callers
(and the CLI exit-code mapping) can distinguish configuration mistakes from
runtime failures without matching on message text.
"""


class RegionMimError(Exception):
    """Base class for all package errors."""


class ConfigError(RegionMimError):
    """Invalid or unknown configuration key/value."""


class ShapeError(RegionMimError):
    """Array dimensions disagree with an operation's contract."""


class GeometryError(RegionMimError):
    """Patch size does not tile the image."""


class CapacityError(RegionMimError):
    """Sequence longer than the positional table allows."""


class StrategyError(RegionMimError):
    """Masking strategy cannot produce a plan (e.g. empty valid set)."""


class LabelError(RegionMimError):
    """Class label outside the valid range."""


class ContractError(RegionMimError):
    """An operation precondition was violated."""


class StratificationError(RegionMimError):
    """A class is missing from a stratified subset."""


class TrainingError(RegionMimError):
    """Optimization failed (e.g. non-finite gradient)."""


class DataError(RegionMimError):
    """Dataset file missing, corrupt, or inconsistent."""


class CheckpointError(RegionMimError):
    """Checkpoint file unreadable, corrupted, or incompatible."""
