"""
Exception hierarchy for the noise source estimator.

All errors derive from ValueError so callers that only care about "bad
input" can keep catching ValueError.
"""

from typing import Any, Optional


class NoiseSourceError(ValueError):
    """Base class for every error raised by the toolkit."""


class DomainError(NoiseSourceError):
    """An argument lies outside the domain of an operation."""


class MissingMetadataError(DomainError):
    """A metadata-fused model was called without camera metadata."""


class ShapeError(NoiseSourceError):
    """Tensor shapes do not agree."""

    def __init__(self, message: str, *shapes: Any):
        self.shapes = shapes
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)


class DatasetError(NoiseSourceError):
    """A dataset directory could not be loaded."""


class VersionMismatchError(DatasetError):
    """Manifest format version differs from the supported one."""


class TruncatedDataError(DatasetError):
    """A record file is shorter than the manifest says."""


class RecordInvariantError(DatasetError):
    """A record violates a TrainingRecord invariant."""

    def __init__(self, message: str, record: Optional[str] = None):
        self.record = record
        if record is not None:
            message = f"record {record}: {message}"
        super().__init__(message)


class DegenerateDistributionError(NoiseSourceError):
    """A noise image has no usable histogram (e.g. all zeros)."""


class NegativeVarianceError(NoiseSourceError):
    """DCSN rectification would produce a negative variance."""

    def __init__(self, dcsn_fit: Any, rn_fit: Any, pair_index: Optional[int] = None):
        self.dcsn_fit = dcsn_fit
        self.rn_fit = rn_fit
        self.pair_index = pair_index
        where = f" (pair {pair_index})" if pair_index is not None else ""
        super().__init__(
            f"negative variance in DCSN rectification{where}: "
            f"dcsn sigma={dcsn_fit.sigma:.4g} < rn sigma={rn_fit.sigma:.4g}"
        )


class TrainingDivergedError(NoiseSourceError):
    """Loss became NaN or infinite."""

    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"training diverged at step {step} (loss={loss})")


class CheckpointError(NoiseSourceError):
    """A parameter checkpoint is malformed or fails its hash check."""
