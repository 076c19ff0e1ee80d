"""Face normalization, eye-region cropping, and semantic mask rasterization.

Raw images arrive with precomputed landmark files (external detectors are a
pluggable input, never reimplemented here). Normalization removes head roll,
centers the face, and scales the crop to 1.7x the eyes' region width; the
eyes' region is the upper half of the normalized face crop.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import cv2
import numpy as np
from matplotlib.path import Path as MplPath
from PIL import Image
from shapely.geometry import Polygon as ShapelyPolygon

from .core import EYE_COMPONENTS, FACE_COMPONENTS, PAINT_ORDER, SegMask, palette_for
from .errors import DegenerateGeometryError, DoubleCropError, MissingLandmarkError
from .manifest import DatasetManifest, SampleRecord

log = logging.getLogger(__name__)

CROP_WIDTH_FACTOR = 1.7
MIN_EYE_CORNER_DISTANCE = 4.0

# Point groups every landmark file must provide (single points).
CORNER_GROUPS = ("left_eye_outer", "left_eye_inner", "right_eye_outer", "right_eye_inner")
MOUTH_GROUPS = ("mouth_left", "mouth_right")
# Polygon/polyline groups used for mask rasterization, keyed by class name.
REGION_GROUPS: dict[str, tuple[str, ...]] = {
    "face": ("face_oval",),
    "nose": ("nose",),
    "eyebrows": ("left_eyebrow", "right_eyebrow"),
    "sclera": ("left_eye", "right_eye"),
    "iris": ("left_iris", "right_iris"),
    "mouth": ("mouth",),
}


@dataclass
class LandmarkSet:
    """Named facial keypoints and region outlines in pixel coordinates."""

    points: dict[str, np.ndarray]
    source: str = "file"

    def __post_init__(self) -> None:
        clean: dict[str, np.ndarray] = {}
        for name, pts in self.points.items():
            arr = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
            if not np.isfinite(arr).all():
                raise MissingLandmarkError(f"landmark group {name!r} contains non-finite points")
            clean[name] = arr
        self.points = clean

    def get(self, name: str) -> np.ndarray:
        if name not in self.points:
            raise MissingLandmarkError(f"required landmark group {name!r} missing")
        return self.points[name]

    def point(self, name: str) -> np.ndarray:
        return self.get(name)[0]

    def has(self, name: str) -> bool:
        return name in self.points and len(self.points[name]) > 0

    def clamp_to(self, width: int, height: int) -> "LandmarkSet":
        pts = {
            k: np.column_stack([np.clip(v[:, 0], 0, width - 1), np.clip(v[:, 1], 0, height - 1)])
            for k, v in self.points.items()
        }
        return LandmarkSet(pts, self.source)

    def to_json(self, gaze: Optional[tuple[float, float]] = None) -> str:
        payload = {
            "source": self.source,
            "points": {k: v.tolist() for k, v in sorted(self.points.items())},
        }
        if gaze is not None:
            payload["gaze"] = list(gaze)
        return json.dumps(payload, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> tuple["LandmarkSet", Optional[tuple[float, float]]]:
        d = json.loads(text)
        lm = LandmarkSet({k: np.array(v) for k, v in d["points"].items()}, d.get("source", "file"))
        gaze = tuple(d["gaze"]) if d.get("gaze") is not None else None
        return lm, gaze


@dataclass
class NormalizationTransform:
    """Similarity transform (rotation, scale, translation) as one affine map.

    Maps source pixel coordinates p to crop coordinates: s * R(rotation) @ p
    + translation.
    """

    rotation: float
    scale: float
    translation: np.ndarray
    crop_width: float = 0.0  # pre-resample crop width in source pixels

    def matrix(self) -> np.ndarray:
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        m = self.scale * np.array([[c, -s], [s, c]])
        return np.column_stack([m, self.translation])

    def apply(self, points: np.ndarray) -> np.ndarray:
        m = self.matrix()
        return points @ m[:, :2].T + m[:, 2]

    def inverse(self) -> "NormalizationTransform":
        if self.scale <= 0:
            raise DegenerateGeometryError("transform is not invertible (scale <= 0)")
        c, s = np.cos(-self.rotation), np.sin(-self.rotation)
        rinv = np.array([[c, -s], [s, c]]) / self.scale
        return NormalizationTransform(
            rotation=-self.rotation,
            scale=1.0 / self.scale,
            translation=-(rinv @ self.translation),
            crop_width=self.crop_width,
        )

    def apply_landmarks(self, lm: LandmarkSet) -> LandmarkSet:
        return LandmarkSet({k: self.apply(v) for k, v in lm.points.items()}, lm.source)


@dataclass
class NormalizedFace:
    """Roll-free, centered face crop with its transform and mapped landmarks."""

    image: np.ndarray  # (S, S, 3) uint8
    transform: NormalizationTransform
    landmarks: LandmarkSet
    size: int


@dataclass
class EyeRegionImage:
    """Square resample of the upper half of a normalized face crop."""

    image: np.ndarray  # (S, S, 3) uint8
    landmarks: LandmarkSet  # in eye-region coordinates
    size: int
    vertical_stretch: float = 2.0


def _face_center(lm: LandmarkSet) -> np.ndarray:
    eyes = np.stack([lm.point(g) for g in CORNER_GROUPS])
    mouth = np.stack([lm.point(g) for g in MOUTH_GROUPS])
    return (eyes.mean(axis=0) + mouth.mean(axis=0)) / 2.0


def normalize_face(image: np.ndarray, lm: LandmarkSet, size: int = 256) -> NormalizedFace:
    """Remove roll, center on the face, scale to 1.7x the eyes' region width.

    The face center is the midpoint of the mean eye-corner point and the mean
    mouth-corner point; the eyes' region width is the horizontal distance
    between the furthest eye corners after roll removal.
    """
    for group in CORNER_GROUPS + MOUTH_GROUPS:
        lm.get(group)
    left = lm.point("left_eye_outer")
    right = lm.point("right_eye_outer")
    delta = right - left
    dist = float(np.hypot(*delta))
    if dist < MIN_EYE_CORNER_DISTANCE:
        raise DegenerateGeometryError(f"eye corners only {dist:.2f}px apart")

    roll = float(np.arctan2(delta[1], delta[0]))
    crop_width = CROP_WIDTH_FACTOR * dist
    scale = size / crop_width
    center = _face_center(lm)
    tf = NormalizationTransform(rotation=-roll, scale=scale, translation=np.zeros(2), crop_width=crop_width)
    tf.translation = np.array([size / 2.0, size / 2.0]) - tf.apply(center[None])[0]

    warped = cv2.warpAffine(image, tf.matrix(), (size, size), flags=cv2.INTER_LINEAR)
    return NormalizedFace(image=warped, transform=tf, landmarks=tf.apply_landmarks(lm), size=size)


def crop_eye_region(normalized: NormalizedFace, out_size: Optional[int] = None) -> EyeRegionImage:
    """Take the upper half of the face crop and resample it to a square.

    Refuses already-cropped inputs: the upper-half rule is not idempotent.
    """
    if isinstance(normalized, EyeRegionImage):
        raise DoubleCropError("input is already an eye-region crop")
    if not isinstance(normalized, NormalizedFace):
        raise DoubleCropError("crop_eye_region expects a NormalizedFace")
    size = normalized.size
    out = out_size or size
    band = normalized.image[: size // 2]
    resized = cv2.resize(band, (out, out), interpolation=cv2.INTER_LINEAR)
    sx = out / size
    sy = out / (size // 2)
    pts = {
        k: v * np.array([sx, sy]) for k, v in normalized.landmarks.points.items()
    }
    return EyeRegionImage(
        image=resized,
        landmarks=LandmarkSet(pts, normalized.landmarks.source),
        size=out,
        vertical_stretch=sy / sx,
    )


def _valid_polygon(pts: np.ndarray) -> Optional[np.ndarray]:
    if len(pts) < 3:
        return None
    poly = ShapelyPolygon(pts)
    if not poly.is_valid:
        warnings.warn("self-intersecting polygon; falling back to convex hull", stacklevel=2)
        hull = poly.convex_hull
        if hull.geom_type != "Polygon":
            return None
        pts = np.asarray(hull.exterior.coords)[:-1]
    return np.asarray(pts, dtype=np.float64)


def _fill_polygon(grid: np.ndarray, pts: np.ndarray, value: int) -> None:
    """Paint pixels whose centers fall inside the polygon (unbiased sampling)."""
    size = grid.shape[0]
    x0 = max(int(np.floor(pts[:, 0].min())), 0)
    x1 = min(int(np.ceil(pts[:, 0].max())) + 1, size)
    y0 = max(int(np.floor(pts[:, 1].min())), 0)
    y1 = min(int(np.ceil(pts[:, 1].max())) + 1, size)
    if x0 >= x1 or y0 >= y1:
        return
    xs, ys = np.meshgrid(np.arange(x0, x1) + 0.5, np.arange(y0, y1) + 0.5)
    ring = np.vstack([pts, pts[:1]])  # CLOSEPOLY consumes the final vertex
    inside = MplPath(ring, closed=True).contains_points(
        np.column_stack([xs.ravel(), ys.ravel()])
    ).reshape(ys.shape)
    region = grid[y0:y1, x0:x1]
    region[inside] = value


def rasterize_mask(
    lm: LandmarkSet, size: int, classes: tuple[str, ...] = EYE_COMPONENTS
) -> SegMask:
    """Fill class polygons back to front; later classes overwrite earlier ones."""
    grid = np.full((size, size), classes.index("background"), dtype=np.uint8)
    for class_name in PAINT_ORDER:
        if class_name == "background" or class_name not in classes:
            continue
        idx = classes.index(class_name)
        for group in REGION_GROUPS.get(class_name, ()):
            if not lm.has(group):
                continue
            poly = _valid_polygon(lm.points[group])
            if poly is None:
                continue
            _fill_polygon(grid, poly, idx)
    return SegMask(grid, classes)


def save_mask_png(mask: SegMask, path: Path) -> None:
    img = Image.fromarray(mask.grid, mode="P")
    img.putpalette(palette_for(mask.classes))
    img.save(path)


@dataclass
class PreprocessConfig:
    size: int = 256
    mode: str = "eyes"  # "eyes" crops the upper half; "face" keeps the full crop
    domain: str = "labeled"
    drop_gaze: bool = False  # force-null gaze fields (unlabeled domains)

    @property
    def classes(self) -> tuple[str, ...]:
        return FACE_COMPONENTS if self.mode == "face" else EYE_COMPONENTS


def preprocess_sample(
    image: np.ndarray, lm: LandmarkSet, cfg: PreprocessConfig
) -> tuple[np.ndarray, SegMask]:
    """Normalize + crop one sample, rasterizing its mask in crop coordinates."""
    normalized = normalize_face(image, lm, size=cfg.size)
    if cfg.mode == "eyes":
        crop = crop_eye_region(normalized)
        return crop.image, rasterize_mask(crop.landmarks, cfg.size, cfg.classes)
    return normalized.image, rasterize_mask(normalized.landmarks, cfg.size, cfg.classes)


def build_dataset(raw_dir: str | Path, out_dir: str | Path, cfg: PreprocessConfig) -> DatasetManifest:
    """Process every raw image with a sibling ``<stem>.json`` landmark file.

    Writes normalized images, indexed masks and a line-delimited manifest
    with deterministic (sorted-by-id) ordering; unreadable samples are
    skipped and counted.
    """
    raw_dir, out_dir = Path(raw_dir), Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    stems = sorted(
        p.stem for p in raw_dir.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    )
    manifest = DatasetManifest(root=out_dir)
    for stem in stems:
        try:
            img_path = next(p for p in raw_dir.glob(stem + ".*") if p.suffix.lower() != ".json")
            image = np.asarray(Image.open(img_path).convert("RGB"))
            lm, gaze = LandmarkSet.from_json((raw_dir / f"{stem}.json").read_text())
            out_image, mask = preprocess_sample(image, lm, cfg)
        except Exception as exc:  # noqa: BLE001 - any bad sample is skipped, not fatal
            log.warning("skipping sample %s: %s", stem, exc)
            manifest.skipped += 1
            continue
        Image.fromarray(out_image).save(out_dir / "images" / f"{stem}.png")
        save_mask_png(mask, out_dir / "masks" / f"{stem}.png")
        manifest.records.append(
            SampleRecord(
                id=stem,
                image_path=f"images/{stem}.png",
                mask_path=f"masks/{stem}.png",
                gaze=None if (cfg.drop_gaze or gaze is None) else tuple(gaze),
                domain=cfg.domain,
                source=lm.source,
            )
        )
    manifest.save(out_dir / "manifest.jsonl")
    return manifest
