"""Exception types shared across the package."""

from __future__ import annotations


class GkdError(Exception):
    """Base class for all package errors."""


class ConfigurationError(GkdError):
    """A configuration value or combination of values is invalid."""


class InputError(GkdError):
    """Runtime input data is invalid (non-finite, empty, out of range)."""


class ShapeError(GkdError):
    """Tensor shapes are incompatible with the requested operation."""


class NumericError(GkdError):
    """A computed quantity is non-finite; carries the offending term name."""

    def __init__(self, term: str, message: str | None = None):
        self.term = term
        super().__init__(message or f"non-finite value in term '{term}'")


class IngestError(GkdError):
    """A dataset file is missing or structurally corrupt.

    `byte_offset` points at the first byte of the offending region when
    the file could be opened at all.
    """

    def __init__(self, path, message: str, byte_offset: int | None = None):
        self.path = str(path)
        self.byte_offset = byte_offset
        loc = f"{path}" if byte_offset is None else f"{path} @ byte {byte_offset}"
        super().__init__(f"{loc}: {message}")


class IntegrityError(GkdError):
    """Checksum verification failed for a downloaded or cached artifact."""


class OracleSizeError(GkdError):
    """The exact optimal-transport oracle refuses instances this large."""


class CheckpointError(GkdError):
    """A checkpoint file is unreadable or has an incompatible format."""


class MissingRunError(GkdError):
    """Strict report construction found an incomplete comparison cell."""


class TrainingAbort(GkdError):
    """Training hit a non-finite loss; carries epoch/batch coordinates."""

    def __init__(self, epoch: int, batch_index: int, term: str):
        self.epoch = epoch
        self.batch_index = batch_index
        self.term = term
        super().__init__(
            f"non-finite loss term '{term}' at epoch {epoch}, batch {batch_index}"
        )
