"""
Custom exceptions for pairwise-mlm are defined here.

The idea is to have subclasses of PairwiseMlmBaseException for each
possible error that can occur in the library. This way, the user can either
catch specific exceptions and handle them accordingly, or even use
PairwiseMlmBaseException as an umbrella to intercept any pairwise-mlm
specific error.
"""

from pathlib import Path
from typing import Iterable, Optional, Union


class PairwiseMlmBaseException(Exception):
    """Parent class for all pairwise-mlm exceptions."""


# --- numerics ---


class NumericError(PairwiseMlmBaseException):
    """Parent class for errors raised by the numeric core."""


class NonFiniteError(NumericError):
    """A tensor holds NaN or infinite values."""

    def __init__(self, tensor_name: str, op: Optional[str] = None):
        self.tensor_name = tensor_name
        where = f" entering {op}" if op else ""
        super().__init__(f"non-finite values in tensor '{tensor_name}'{where}")


class NonFiniteActivationError(NumericError):
    """An encoder activation became non-finite."""

    def __init__(self, layer_name: str):
        self.layer_name = layer_name
        super().__init__(f"non-finite activation produced by {layer_name}")


class NonFiniteGradientError(NumericError):
    """A gradient became non-finite; training must abort."""

    def __init__(self, param_name: str):
        self.param_name = param_name
        super().__init__(f"non-finite gradient for parameter '{param_name}'")


class ShapeMismatchError(NumericError):
    """Operands have incompatible shapes."""


class LabelOutOfRangeError(NumericError):
    """A class label falls outside of the vocabulary."""


class GraphError(NumericError):
    """Backward cannot run on the given graph (e.g. non-scalar loss)."""


# --- data ---


class FastaParseError(PairwiseMlmBaseException):
    """Malformed FASTA input."""

    def __init__(self, message: str, line_number: int):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {message}")


class VocabularyError(PairwiseMlmBaseException):
    """A symbol or id is not part of the vocabulary it is used with."""


class SequenceTooLongError(PairwiseMlmBaseException):
    """A sequence does not fit the configured maximum length."""


class EmptyMaskError(PairwiseMlmBaseException):
    """A loss was requested over an empty set of masked positions."""


class ContactMapMismatchError(PairwiseMlmBaseException):
    """A contact map does not match the length of its sequence."""

    def __init__(self, record_id: str, seq_len: int, map_len: int):
        self.record_id = record_id
        super().__init__(
            f"record '{record_id}': sequence length {seq_len} does not match "
            f"contact map size {map_len}"
        )


class DatasetSplitError(PairwiseMlmBaseException):
    """The training or validation split came out empty."""


class RangeFilterError(PairwiseMlmBaseException):
    """No residue pair passes the sequence-separation filter."""


class ScoreMapError(PairwiseMlmBaseException):
    """A contact score map is missing or does not cover the pairs being ranked."""


# --- synthetic data ---


class ExactModeBoundError(PairwiseMlmBaseException):
    """Exact enumeration was requested beyond its supported size."""


class SpecValidationError(PairwiseMlmBaseException):
    """A coupled model specification is inconsistent."""


# --- persistence ---


class CheckpointError(PairwiseMlmBaseException):
    """Parent class for checkpoint errors."""


class CheckpointNotFoundError(CheckpointError):
    """The checkpoint file does not exist."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        super().__init__(f"checkpoint not found: {self.path}")


class CheckpointVersionError(CheckpointError):
    """The checkpoint was written by an incompatible format or vocabulary version."""


class TruncatedCheckpointError(CheckpointError):
    """The checkpoint file is shorter than its manifest says."""


class CheckpointShapeError(CheckpointError):
    """A stored array does not match the shape expected by the model."""

    def __init__(self, array_name: str, expected: tuple, found: tuple):
        self.array_name = array_name
        super().__init__(
            f"shape mismatch for '{array_name}': model expects {expected}, checkpoint has {found}"
        )


# --- configuration & io ---


class ConfigKeyError(PairwiseMlmBaseException):
    """A configuration key is not recognized."""

    def __init__(self, key: str, valid_keys: Iterable[str]):
        self.key = key
        self.valid_keys = sorted(valid_keys)
        super().__init__(
            f"unknown configuration key '{key}'. Valid keys are: {', '.join(self.valid_keys)}"
        )


class ConfigValidationError(PairwiseMlmBaseException):
    """Configuration values failed validation."""


class UnsupportedFileFormatError(PairwiseMlmBaseException):
    """Unsupported file format"""


class PairwiseMlmImportError(PairwiseMlmBaseException):
    """Error importing a module or class"""


class PairwiseMlmDumperError(PairwiseMlmBaseException):
    """Error dumping data"""


class PairwiseMlmTypeError(PairwiseMlmBaseException):
    """Data received is of the wrong type"""


class RenderableTemplateError(PairwiseMlmBaseException):
    """An error occurred while trying to render a PairwiseMlmRenderableModel"""


class RecordDoesNotExistError(PairwiseMlmBaseException):
    """No record in the store matches the search criteria."""


class MultipleRecordsReturnedError(PairwiseMlmBaseException):
    """More than one record matches search criteria, when only one should."""


class RecordStoreDirectAssignmentError(PairwiseMlmBaseException):
    """Cannot directly assign to attribute 'records' of a RecordStore object."""


# --- training ---


class TrainingAbortedError(PairwiseMlmBaseException):
    """Training stopped on a non-finite loss or gradient."""

    def __init__(self, message: str, last_good_checkpoint: Optional[Path] = None):
        self.last_good_checkpoint = last_good_checkpoint
        if last_good_checkpoint is not None:
            message = f"{message} (last good checkpoint: {last_good_checkpoint})"
        super().__init__(message)
