"""Exception hierarchy for the mriseq package."""


class MriseqError(Exception):
    """Base class for all package errors."""


class ConfigError(MriseqError):
    """Invalid or unparseable configuration (bad value, unknown key)."""


# --- ingestion ---------------------------------------------------------------

class MixedSeriesError(MriseqError):
    """Slices from more than one series were passed to the assembler."""


class NonUniformGapError(MriseqError):
    """Inter-slice gaps deviate from the median by more than the tolerance."""


class DuplicatePositionError(MriseqError):
    """Two slices share the same position along the slice normal."""


class MissingIdentifierError(MriseqError):
    """Patient, study, or series identifier absent from the metadata."""


class UnreadableFileError(MriseqError):
    """File could not be parsed as the expected container format."""


class Not3DError(MriseqError):
    """Volume rank is not 3 after squeezing singleton dimensions."""


class EmptyDatasetError(MriseqError):
    """No studies found under the dataset root."""


# --- model / checkpoint -------------------------------------------------------

class InvalidConfigError(MriseqError):
    """Model configuration cannot produce a valid network."""


class ShapeMismatchError(MriseqError):
    """Input batch shape does not match the model configuration."""


class FingerprintMismatchError(MriseqError):
    """Checkpoint metadata disagrees with the expected configuration."""


class CorruptCheckpointError(MriseqError):
    """Checkpoint file is truncated or not a checkpoint at all."""


# --- splitting / training -----------------------------------------------------

class TooFewPatientsError(MriseqError):
    """Not enough patients to produce the requested split."""


class TooFewForKError(MriseqError):
    """Fewer patients than cross-validation folds."""


class LabelOutOfRangeError(MriseqError):
    """A class index falls outside [0, num_classes)."""


class NonFiniteLossError(MriseqError):
    """Training loss became NaN or infinite."""


class EmptyFoldError(MriseqError):
    """A fold has no training series."""


# --- evaluation ---------------------------------------------------------------

class EmptyMatrixError(MriseqError):
    """Metrics requested on a confusion matrix with zero total count."""


class MixedLabelSetsError(MriseqError):
    """Reports or checkpoints from different label sets were combined."""


# --- phantom ------------------------------------------------------------------

class InvalidSpecError(MriseqError):
    """Phantom generation spec violates its invariants."""
