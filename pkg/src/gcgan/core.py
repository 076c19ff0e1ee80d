"""Shared domain types: gaze directions, segmentation masks, class tables."""
from __future__ import annotations

import random
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch

# Canonical component/class order. Mask class index k corresponds to the
# k-th local generator, so the two tables must never diverge.
EYE_COMPONENTS: tuple[str, ...] = ("background", "face", "iris", "sclera", "eyebrows", "nose")
FACE_COMPONENTS: tuple[str, ...] = EYE_COMPONENTS + ("mouth",)
GAZE_COMPONENTS: frozenset[str] = frozenset({"iris", "sclera"})

# Painting order for rasterization, back to front: later entries overwrite.
PAINT_ORDER: tuple[str, ...] = ("background", "face", "mouth", "nose", "eyebrows", "sclera", "iris")

# Fixed palette for indexed mask PNGs (RGB per class index).
CLASS_PALETTE: dict[str, tuple[int, int, int]] = {
    "background": (0, 0, 0),
    "face": (204, 163, 128),
    "iris": (40, 60, 160),
    "sclera": (240, 240, 240),
    "eyebrows": (90, 56, 28),
    "nose": (222, 130, 100),
    "mouth": (170, 50, 60),
}


class GazeDirection(NamedTuple):
    """Gaze as roll-free yaw/pitch angles in radians."""

    yaw: float
    pitch: float

    def as_array(self) -> np.ndarray:
        return np.array([self.yaw, self.pitch], dtype=np.float64)

    @staticmethod
    def validate(yaw: float, pitch: float) -> "GazeDirection":
        if not (np.isfinite(yaw) and np.isfinite(pitch)):
            raise ValueError(f"gaze angles must be finite, got ({yaw}, {pitch})")
        return GazeDirection(float(yaw), float(pitch))


def gaze_batch(gazes: Sequence[GazeDirection], dtype=torch.float32) -> torch.Tensor:
    """Stack gaze directions into a (N, 2) tensor of [yaw, pitch] rows."""
    return torch.tensor([[g.yaw, g.pitch] for g in gazes], dtype=dtype)


@dataclass
class SegMask:
    """Dense per-pixel class indices over a fixed class table.

    ``grid`` is an H x W uint8 array of class indices; ``classes`` names the
    index table. Every pixel belongs to exactly one class.
    """

    grid: np.ndarray
    classes: tuple[str, ...] = EYE_COMPONENTS

    def __post_init__(self) -> None:
        self.grid = np.asarray(self.grid, dtype=np.uint8)
        if self.grid.ndim != 2:
            raise ValueError(f"mask grid must be 2-D, got shape {self.grid.shape}")
        if self.grid.max(initial=0) >= len(self.classes):
            raise ValueError("mask contains a class index outside the class table")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def one_hot(self) -> np.ndarray:
        """Expand to a {0,1} array of shape (K, H, W); channels sum to 1 per pixel."""
        k = self.num_classes
        out = np.zeros((k,) + self.grid.shape, dtype=np.float32)
        for c in range(k):
            out[c] = self.grid == c
        return out

    def class_index(self, name: str) -> int:
        return self.classes.index(name)

    def pixels_of(self, name: str) -> np.ndarray:
        """Boolean H x W membership map for a named class."""
        return self.grid == self.class_index(name)

    @staticmethod
    def from_one_hot(one_hot: np.ndarray, classes: tuple[str, ...] = EYE_COMPONENTS) -> "SegMask":
        return SegMask(grid=np.argmax(one_hot, axis=0).astype(np.uint8), classes=classes)


def palette_for(classes: Sequence[str]) -> list[int]:
    """Flat RGB palette list for PIL indexed PNGs, in class-index order."""
    flat: list[int] = []
    for name in classes:
        flat.extend(CLASS_PALETTE[name])
    return flat


def seed_everything(seed: int) -> None:
    """Seed python, numpy and torch global RNGs for reproducible runs."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
