"""
Custom exceptions for the firecast package.
"""
from typing import Optional, Sequence, Tuple


class FirecastError(Exception):
    """Base exception for all firecast errors."""
    pass


class ConfigurationError(FirecastError):
    """Raised when a parameter or config file is invalid."""
    pass


class DataError(FirecastError):
    """Base class for errors in simulation, dataset, or checkpoint data."""
    pass


class InitializationError(DataError):
    """Raised when a forest cannot be seeded with the requested fires."""
    pass


class DatasetError(DataError):
    """Base class for dataset container errors."""
    pass


class ChecksumMismatchError(DatasetError):
    """Raised when a chunk payload does not match its manifest checksum."""

    def __init__(self, chunk_index: int, sim_id: int, start_step: int):
        self.chunk_index = chunk_index
        self.sim_id = sim_id
        self.start_step = start_step
        super().__init__(
            f"Checksum mismatch in chunk {chunk_index} "
            f"(sim_id={sim_id}, start_step={start_step})"
        )


class FormatVersionError(DatasetError):
    """Raised when a dataset was written with an unsupported format version."""
    pass


class TruncatedDatasetError(DatasetError):
    """Raised when the payload file is shorter than the manifest requires."""
    pass


class ChunkLayoutError(DatasetError):
    """Raised when a chunk's byte length disagrees with the manifest's chunk shape."""

    def __init__(self, chunk_index: int, length: int, expected: int, shape: Tuple[int, ...]):
        self.chunk_index = chunk_index
        self.length = length
        self.expected = expected
        self.shape = shape
        super().__init__(
            f"Chunk {chunk_index} holds {length} bytes but the manifest shape {shape} "
            f"needs {expected}"
        )


class SplitLeakError(DatasetError):
    """Raised when train and test splits share a simulation."""
    pass


class PaletteError(DataError):
    """Raised when a palette is incomplete, not injective, or maps Empty to a color."""
    pass


class CheckpointError(DataError):
    """Raised when a checkpoint file is malformed or does not match its model spec."""
    pass


class DimensionError(FirecastError, ValueError):
    """Raised when tensor shapes are inconsistent; names the offending axis."""

    def __init__(self, message: str, axis: Optional[str] = None):
        self.axis = axis
        super().__init__(message)


class NumericalError(FirecastError):
    """Base class for non-finite values during training."""
    pass


class NonFiniteGradientError(NumericalError):
    """Raised by the optimizer when a gradient contains NaN or infinity."""
    pass


class NonFiniteLossError(NumericalError):
    """Raised when the training loss becomes NaN or infinite."""

    def __init__(self, epoch: int, batch: int, chunk_ids: Sequence[Tuple[int, int]]):
        self.epoch = epoch
        self.batch = batch
        self.chunk_ids = list(chunk_ids)
        super().__init__(
            f"Non-finite loss at epoch {epoch}, batch {batch}, "
            f"chunks (sim_id, start_step) {self.chunk_ids}"
        )


class SweepError(FirecastError):
    """Raised when training fails for one AOI of a multi-AOI sweep."""

    def __init__(self, aoi: Tuple[int, int], cause: Exception):
        self.aoi = aoi
        self.cause = cause
        super().__init__(f"Training failed for AOI {aoi}: {type(cause).__name__}: {cause}")


class UndefinedMetricError(FirecastError, ValueError):
    """Raised when a metric is undefined for its input, e.g. ROC AUC on one class."""
    pass
