"""Line-delimited dataset manifests and tensor loading helpers."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch
from PIL import Image

from .core import GazeDirection, SegMask


@dataclass
class SampleRecord:
    """One dataset row; ``gaze`` is [yaw, pitch] radians or None for unlabeled data."""

    id: str
    image_path: str
    mask_path: str
    gaze: Optional[tuple[float, float]]
    domain: str
    source: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "id": self.id,
                "image_path": self.image_path,
                "mask_path": self.mask_path,
                "gaze": list(self.gaze) if self.gaze is not None else None,
                "domain": self.domain,
                "source": self.source,
            },
            sort_keys=True,
        )

    @staticmethod
    def from_json(line: str) -> "SampleRecord":
        d = json.loads(line)
        gaze = tuple(d["gaze"]) if d["gaze"] is not None else None
        return SampleRecord(
            id=d["id"],
            image_path=d["image_path"],
            mask_path=d["mask_path"],
            gaze=gaze,
            domain=d["domain"],
            source=d["source"],
        )


@dataclass
class DatasetManifest:
    """Ordered collection of sample records plus build bookkeeping."""

    records: list[SampleRecord] = field(default_factory=list)
    skipped: int = 0
    root: Optional[Path] = None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[SampleRecord]:
        return iter(self.records)

    def labeled(self) -> list[SampleRecord]:
        return [r for r in self.records if r.gaze is not None]

    def gaze_array(self) -> np.ndarray:
        """(N, 2) array of labeled gazes, in record order."""
        return np.array([r.gaze for r in self.labeled()], dtype=np.float64)

    def save(self, path: str | Path) -> Path:
        """Write manifest.jsonl next to a small meta sidecar with counts."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(rec.to_json() + "\n")
        meta = {"count": len(self.records), "skipped": self.skipped}
        path.with_suffix(".meta.json").write_text(json.dumps(meta, sort_keys=True))
        return path

    @staticmethod
    def load(path: str | Path) -> "DatasetManifest":
        path = Path(path)
        records = [SampleRecord.from_json(line) for line in path.read_text().splitlines() if line]
        skipped = 0
        meta_path = path.with_suffix(".meta.json")
        if meta_path.exists():
            skipped = json.loads(meta_path.read_text()).get("skipped", 0)
        return DatasetManifest(records=records, skipped=skipped, root=path.parent)

    def resolve(self, rel: str) -> Path:
        root = self.root if self.root is not None else Path(".")
        return root / rel


def load_image_tensor(path: Path) -> torch.Tensor:
    """Load an RGB image as a (3, H, W) float tensor scaled to [-1, 1]."""
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1) / 127.5 - 1.0)


def load_mask(path: Path, classes: tuple[str, ...]) -> SegMask:
    arr = np.asarray(Image.open(path), dtype=np.uint8)
    return SegMask(arr, classes)


@dataclass
class TensorDataset:
    """Whole dataset resident in memory; small desk-scale corpora only."""

    images: torch.Tensor  # (N, 3, H, W) in [-1, 1]
    masks: torch.Tensor  # (N, K, H, W) one-hot
    gazes: torch.Tensor  # (N, 2); NaN rows where unlabeled
    ids: list[str]

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def has_labels(self) -> bool:
        return bool(torch.isfinite(self.gazes).all())

    def labeled_gazes(self) -> np.ndarray:
        keep = torch.isfinite(self.gazes).all(dim=1)
        return self.gazes[keep].numpy().astype(np.float64)

    def batch(self, idx: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return self.images[idx], self.masks[idx], self.gazes[idx]


def load_tensor_dataset(manifest: DatasetManifest, classes: tuple[str, ...]) -> TensorDataset:
    images, masks, gazes, ids = [], [], [], []
    for rec in manifest:
        images.append(load_image_tensor(manifest.resolve(rec.image_path)))
        masks.append(torch.from_numpy(load_mask(manifest.resolve(rec.mask_path), classes).one_hot()))
        if rec.gaze is not None:
            gazes.append(torch.tensor(rec.gaze, dtype=torch.float32))
        else:
            gazes.append(torch.full((2,), float("nan")))
        ids.append(rec.id)
    return TensorDataset(
        images=torch.stack(images),
        masks=torch.stack(masks),
        gazes=torch.stack(gazes),
        ids=ids,
    )


def gaze_of(rec: SampleRecord) -> Optional[GazeDirection]:
    return GazeDirection(*rec.gaze) if rec.gaze is not None else None
