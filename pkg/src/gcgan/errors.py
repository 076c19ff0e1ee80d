"""Exception types shared across the pipeline."""
from __future__ import annotations


class GCGANError(Exception):
    """Base class for pipeline errors."""


class ContractError(GCGANError):
    """An operation was called in violation of its interface contract."""


class MissingLandmarkError(GCGANError):
    """A required landmark group is absent from a landmark set."""


class DegenerateGeometryError(GCGANError):
    """Landmark geometry is too degenerate to normalize (e.g. collapsed eyes)."""


class DoubleCropError(GCGANError):
    """An eye-region crop was requested on an already-cropped image."""


class CheckpointError(GCGANError):
    """Checkpoint file is corrupt, truncated, or has an unsupported version."""


class NonFiniteLossError(GCGANError):
    """Training produced a non-finite loss; carries a diagnostic dump."""

    def __init__(self, message: str, dump: dict | None = None):
        super().__init__(message)
        self.dump = dump or {}


class InversionDivergenceError(GCGANError):
    """Latent optimization diverged and the restart also failed."""
