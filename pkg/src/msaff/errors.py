"""Exception hierarchy shared by every msaff module."""


class MsaffError(Exception):
    """Base class for all msaff errors."""


class ShapeError(MsaffError, ValueError):
    """Tensor dimensions do not line up."""


class ConfigError(MsaffError, ValueError):
    """Invalid hyperparameter or structural configuration."""


class UsageError(MsaffError, RuntimeError):
    """API called in a way its contract forbids."""


class NumericalError(MsaffError, ArithmeticError):
    """A NaN or Inf appeared in a forward value or gradient."""


class PreprocessingError(MsaffError, ValueError):
    """Input frames do not match the expected preprocessed size."""


class InputError(MsaffError, ValueError):
    """Raw input data is malformed (e.g. non-finite coordinates)."""


class PairingError(MsaffError, ValueError):
    """Silhouette and skeleton streams are not frame-aligned."""


class AlignmentError(PairingError):
    """Stored silhouette and skeleton frame counts disagree."""


class ParseError(MsaffError, ValueError):
    """A data file could not be parsed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DatasetError(MsaffError, ValueError):
    """Dataset cannot satisfy the requested sampling or split."""


class ProtocolError(MsaffError, ValueError):
    """Retrieval protocol is not evaluable."""


class TrainingError(MsaffError, RuntimeError):
    """Training cannot proceed (undefined loss, non-finite update)."""


class SpecError(ConfigError):
    """Synthetic-data spec is degenerate."""
