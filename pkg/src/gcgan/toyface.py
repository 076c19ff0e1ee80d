"""Deterministic parametric face renderer with exact gaze ground truth.

Faces are simple layered shapes (oval face, circular sclera/iris, eyebrow
quads, nose polygon, mouth). The iris center is displaced from the sclera
center by ``IRIS_OFFSET_GAIN * sin(gaze) * sclera_radius``, which makes gaze
exactly decodable from the segmentation mask - the ground-truth oracle used
to verify the whole learned pipeline.
"""
from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .core import FACE_COMPONENTS, GazeDirection, SegMask
from .errors import ContractError
from .manifest import DatasetManifest, SampleRecord
from .preprocess import LandmarkSet, PreprocessConfig, preprocess_sample, rasterize_mask, save_mask_png

# Gain applied to sin(gaze) when displacing the iris inside the sclera.
IRIS_OFFSET_GAIN = 0.6
# Sampled gaze range (radians) for both yaw and pitch.
GAZE_RANGE = 0.4

_CIRCLE_SEGMENTS = 24
_OVAL_SEGMENTS = 40
_SUPERSAMPLE = 3


@dataclass
class ToyFaceParams:
    """Relative-unit shape parameters; all lengths are fractions of image size."""

    face_hue: float = 0.08
    skin_shade: float = 0.85
    eyebrow_thickness: float = 0.02
    eyebrow_angle: float = 0.0
    nose_size: float = 0.07
    eye_spacing: float = 0.125
    sclera_radius: float = 0.105
    iris_radius: float = 0.054
    gaze: GazeDirection = GazeDirection(0.0, 0.0)
    seed: int = 0
    style: str = "A"

    def __post_init__(self) -> None:
        if self.iris_radius >= self.sclera_radius:
            raise ContractError("iris radius must be smaller than sclera radius")
        reach = IRIS_OFFSET_GAIN * math.sin(GAZE_RANGE) * math.sqrt(2.0)
        if reach * self.sclera_radius + self.iris_radius > self.sclera_radius:
            raise ContractError("iris would clip the sclera at the gaze range extremes")


def sample_params(rng: np.random.Generator, style: str = "A", seed: int = 0) -> ToyFaceParams:
    """Draw face parameters; style B shifts the palette statistics."""
    if style == "A":
        hue = rng.uniform(0.05, 0.11)
        shade = rng.uniform(0.75, 0.95)
    elif style == "B":
        hue = rng.uniform(0.88, 0.98)
        shade = rng.uniform(0.50, 0.72)
    else:
        raise ContractError(f"unknown toy style {style!r}")
    r_s = rng.uniform(0.095, 0.108)
    return ToyFaceParams(
        face_hue=float(hue),
        skin_shade=float(shade),
        eyebrow_thickness=float(rng.uniform(0.012, 0.028)),
        eyebrow_angle=float(rng.uniform(-0.25, 0.25)),
        nose_size=float(rng.uniform(0.05, 0.09)),
        eye_spacing=float(rng.uniform(0.125, 0.142)),
        sclera_radius=float(r_s),
        iris_radius=float(r_s * rng.uniform(0.48, 0.56)),
        gaze=GazeDirection(float(rng.uniform(-GAZE_RANGE, GAZE_RANGE)),
                           float(rng.uniform(-GAZE_RANGE, GAZE_RANGE))),
        seed=seed,
        style=style,
    )


def _hsv255(h: float, s: float, v: float) -> tuple[int, int, int]:
    r, g, b = colorsys.hsv_to_rgb(h % 1.0, s, v)
    return int(r * 255), int(g * 255), int(b * 255)


def _circle_poly(cx: float, cy: float, rx: float, ry: float, n: int) -> np.ndarray:
    t = np.arange(n) * (2 * math.pi / n)
    return np.column_stack([cx + rx * np.cos(t), cy + ry * np.sin(t)])


def _rot(pts: np.ndarray, center: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    rel = pts - center
    return center + rel @ np.array([[c, s], [-s, c]])


def toy_landmarks(p: ToyFaceParams, size: int) -> LandmarkSet:
    """Geometry of every face component as polygons/points in pixel coords."""
    s = float(size)
    mid = 0.5 * s
    eye_y = 0.42 * s
    ex = p.eye_spacing * s
    r_s = p.sclera_radius * s
    r_i = p.iris_radius * s

    off = IRIS_OFFSET_GAIN * r_s
    dx, dy = off * math.sin(p.gaze.yaw), off * math.sin(p.gaze.pitch)

    def eyebrow(cx: float) -> np.ndarray:
        half_w = 0.08 * s
        th = p.eyebrow_thickness * s
        cy = eye_y - 0.155 * s
        quad = np.array(
            [[cx - half_w, cy - th], [cx + half_w, cy - th], [cx + half_w, cy + th], [cx - half_w, cy + th]]
        )
        return _rot(quad, np.array([cx, cy]), p.eyebrow_angle)

    nose_w = p.nose_size * s
    groups: dict[str, np.ndarray] = {
        "face_oval": _circle_poly(mid, 0.55 * s, 0.33 * s, 0.43 * s, _OVAL_SEGMENTS),
        "left_eyebrow": eyebrow(mid - ex),
        "right_eyebrow": eyebrow(mid + ex),
        "nose": np.array([[mid, 0.50 * s], [mid + nose_w, 0.63 * s], [mid - nose_w, 0.63 * s]]),
        "mouth": _circle_poly(mid, 0.78 * s, 0.10 * s, 0.035 * s, _CIRCLE_SEGMENTS),
        "left_eye": _circle_poly(mid - ex, eye_y, r_s, r_s, 2 * _CIRCLE_SEGMENTS),
        "right_eye": _circle_poly(mid + ex, eye_y, r_s, r_s, 2 * _CIRCLE_SEGMENTS),
        "left_iris": _circle_poly(mid - ex + dx, eye_y + dy, r_i, r_i, _CIRCLE_SEGMENTS),
        "right_iris": _circle_poly(mid + ex + dx, eye_y + dy, r_i, r_i, _CIRCLE_SEGMENTS),
        "left_eye_outer": np.array([[mid - ex - r_s, eye_y]]),
        "left_eye_inner": np.array([[mid - ex + r_s, eye_y]]),
        "right_eye_outer": np.array([[mid + ex + r_s, eye_y]]),
        "right_eye_inner": np.array([[mid + ex - r_s, eye_y]]),
        "left_iris_center": np.array([[mid - ex + dx, eye_y + dy]]),
        "right_iris_center": np.array([[mid + ex + dx, eye_y + dy]]),
        "mouth_left": np.array([[mid - 0.10 * s, 0.78 * s]]),
        "mouth_right": np.array([[mid + 0.10 * s, 0.78 * s]]),
    }
    return LandmarkSet(groups, source="toy-renderer")


def render_toy(
    p: ToyFaceParams, size: int = 256
) -> tuple[np.ndarray, SegMask, LandmarkSet, GazeDirection]:
    """Render an anti-aliased face image plus its exact mask and landmarks."""
    rng = np.random.default_rng(p.seed)
    lm = toy_landmarks(p, size)

    skin = _hsv255(p.face_hue, 0.45, p.skin_shade)
    darker = _hsv255(p.face_hue, 0.55, p.skin_shade * 0.82)
    brow = _hsv255(0.07, 0.75, 0.25 + 0.1 * (p.seed % 3))
    iris_hue = float(rng.uniform(0.52, 0.65)) if p.style == "A" else float(rng.uniform(0.05, 0.16))
    iris = _hsv255(iris_hue, 0.7, 0.45)
    mouth = _hsv255(0.99, 0.6, 0.65)
    sclera = (245, 245, 245)
    if p.style == "A":
        background = _hsv255(0.55, 0.15, 0.35 + 0.25 * float(rng.uniform(0, 1)))
    else:
        background = _hsv255(0.30, 0.30, 0.18 + 0.15 * float(rng.uniform(0, 1)))

    ss = _SUPERSAMPLE
    canvas = Image.new("RGB", (size * ss, size * ss), background)
    draw = ImageDraw.Draw(canvas)

    def fill(group: str, color: tuple[int, int, int]) -> None:
        pts = [(x * ss, y * ss) for x, y in lm.points[group]]
        draw.polygon(pts, fill=color)

    fill("face_oval", skin)
    fill("mouth", mouth)
    fill("nose", darker)
    fill("left_eyebrow", brow)
    fill("right_eyebrow", brow)
    fill("left_eye", sclera)
    fill("right_eye", sclera)
    fill("left_iris", iris)
    fill("right_iris", iris)

    image = np.asarray(canvas.resize((size, size), Image.BOX), dtype=np.float32)
    if p.style == "B":
        # Unlabeled-domain appearance gap: film grain plus a horizontal shading ramp.
        noise = rng.normal(0.0, 9.0, size=image.shape[:2])[..., None]
        ramp = np.linspace(-14.0, 14.0, size, dtype=np.float32)[None, :, None]
        image = image + noise + ramp
    image = np.clip(image, 0, 255).astype(np.uint8)

    mask = rasterize_mask(lm, size, FACE_COMPONENTS)
    return image, mask, lm, p.gaze


def decode_gaze_from_mask(mask: SegMask, offset_gain: float = IRIS_OFFSET_GAIN) -> GazeDirection:
    """Recover gaze from iris/sclera geometry; the inverse of the renderer.

    Per eye, the full sclera disk is the union of sclera and iris pixels; its
    per-axis radius is estimated from second moments (robust to anisotropic
    resampling such as the eye-region crop's vertical stretch). The decoded
    angle is ``arcsin(centroid offset / (gain * radius))`` averaged over the
    eyes that are visible.
    """
    iris = mask.pixels_of("iris")
    sclera = mask.pixels_of("sclera")
    union = iris | sclera
    if not union.any() or not iris.any():
        raise ContractError("mask contains no decodable eye (iris/sclera missing)")

    labels, count = ndimage.label(union)
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=range(1, count + 1))
    order = np.argsort(sizes)[::-1][:2]

    estimates = []
    for comp_idx in order:
        comp = labels == (comp_idx + 1)
        comp_iris = comp & iris
        if not comp_iris.any():
            continue
        ys, xs = np.nonzero(comp)
        iys, ixs = np.nonzero(comp_iris)
        rx = 2.0 * xs.std()
        ry = 2.0 * ys.std()
        if rx <= 0 or ry <= 0:
            continue
        ox = (ixs.mean() - xs.mean()) / (offset_gain * rx)
        oy = (iys.mean() - ys.mean()) / (offset_gain * ry)
        estimates.append((math.asin(max(-1.0, min(1.0, ox))), math.asin(max(-1.0, min(1.0, oy)))))
    if not estimates:
        raise ContractError("no eye region with both sclera and iris pixels")
    arr = np.array(estimates)
    return GazeDirection(float(arr[:, 0].mean()), float(arr[:, 1].mean()))


def synth_corpus(
    out_dir: str | Path,
    n: int,
    seed: int,
    domain_style: str = "A",
    crop_size: int = 64,
    raw_size: int = 160,
) -> DatasetManifest:
    """Generate a preprocessed toy corpus in the standard dataset layout.

    Style A manifests carry gaze labels; style B withholds them in the
    manifest and stores the true values in a sidecar file for oracle use.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    cfg = PreprocessConfig(size=crop_size, mode="eyes", domain=f"toy-{domain_style}")

    manifest = DatasetManifest(root=out_dir)
    oracle: dict[str, list[float]] = {}
    for i in range(n):
        sample_seed = seed * 1_000_003 + i
        params = sample_params(np.random.default_rng(sample_seed), domain_style, seed=sample_seed)
        image, _, lm, gaze = render_toy(params, raw_size)
        out_image, out_mask = preprocess_sample(image, lm, cfg)
        sid = f"{domain_style.lower()}{i:05d}"
        Image.fromarray(out_image).save(out_dir / "images" / f"{sid}.png")
        save_mask_png(out_mask, out_dir / "masks" / f"{sid}.png")
        oracle[sid] = [gaze.yaw, gaze.pitch]
        manifest.records.append(
            SampleRecord(
                id=sid,
                image_path=f"images/{sid}.png",
                mask_path=f"masks/{sid}.png",
                gaze=(gaze.yaw, gaze.pitch) if domain_style == "A" else None,
                domain=f"toy-{domain_style}",
                source="toy-renderer",
            )
        )
    manifest.save(out_dir / "manifest.jsonl")
    if domain_style == "B":
        (out_dir / "oracle_gaze.json").write_text(json.dumps(oracle, sort_keys=True))
    return manifest


def write_raw_corpus(
    out_dir: str | Path, n: int, seed: int, domain_style: str = "A", raw_size: int = 160
) -> int:
    """Emit raw full-face images + landmark JSONs for the preprocess CLI."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        sample_seed = seed * 1_000_003 + i
        params = sample_params(np.random.default_rng(sample_seed), domain_style, seed=sample_seed)
        image, _, lm, gaze = render_toy(params, raw_size)
        sid = f"{domain_style.lower()}{i:05d}"
        Image.fromarray(image).save(out_dir / f"{sid}.png")
        payload = (gaze.yaw, gaze.pitch) if domain_style == "A" else None
        (out_dir / f"{sid}.json").write_text(lm.to_json(gaze=payload))
    return n


def load_oracle_gazes(dataset_dir: str | Path) -> dict[str, GazeDirection]:
    data = json.loads((Path(dataset_dir) / "oracle_gaze.json").read_text())
    return {k: GazeDirection(*v) for k, v in data.items()}
