"""Annotated synthetic dataset production: component edits, gaze
redirection, and cross-domain pairs with confidence filtering."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.interpolate import CubicSpline

from .core import GAZE_COMPONENTS, GazeDirection
from .errors import ContractError
from .generator import CompositionalGenerator, ImageMaskPair, LatentCode
from .manifest import DatasetManifest, SampleRecord
from .preprocess import save_mask_png

log = logging.getLogger(__name__)


def resample_component(
    model: CompositionalGenerator,
    w: LatentCode,
    component: str,
    seed: int,
    part: str = "both",
    force_gaze_components: bool = False,
) -> LatentCode:
    """Replace one component's latent slot with a freshly mapped draw.

    Editing the gaze-bearing components (iris/sclera) invalidates any gaze
    annotation carried alongside, so it is rejected unless forced.
    """
    if component not in w.components:
        raise ContractError(f"unknown component {component!r}")
    if component in GAZE_COMPONENTS and not force_gaze_components:
        raise ContractError(
            f"resampling {component!r} would break gaze-label preservation; "
            "pass force_gaze_components=True to do it anyway"
        )
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(w.batch_size, model.cfg.z_dim, generator=gen)
    fresh = model.map_latent(z)
    half = w.w_dim // 2
    if part == "both":
        return w.replace_local(component, fresh.local(component))
    if part == "shape":
        return w.replace_local(component, fresh.local(component)[:, :half], part="shape")
    if part == "texture":
        return w.replace_local(component, fresh.local(component)[:, half:], part="texture")
    raise ContractError(f"unknown slot part {part!r}")


def interpolate_component(
    waypoints: Sequence[LatentCode], component: str, steps: int
) -> list[LatentCode]:
    """Natural cubic spline through the component's codes at the waypoints.

    All other slots are copied from the first waypoint; the returned path
    reproduces the endpoints exactly and passes through every knot.
    """
    if len(waypoints) < 2:
        raise ContractError("interpolation requires at least two waypoints")
    if steps < 2:
        raise ContractError("steps must be >= 2 (endpoints included)")
    comps = waypoints[0].components
    for wp in waypoints[1:]:
        if wp.components != comps or wp.tensor.shape != waypoints[0].tensor.shape:
            raise ContractError("waypoints come from different model configs")
    knots = np.stack([wp.local(component)[0].detach().cpu().numpy() for wp in waypoints])
    t = np.arange(len(waypoints), dtype=np.float64)
    spline = CubicSpline(t, knots, axis=0, bc_type="natural")
    samples = spline(np.linspace(0.0, t[-1], steps))
    out = []
    for row in samples:
        value = torch.from_numpy(np.ascontiguousarray(row)).to(waypoints[0].tensor.dtype)
        out.append(waypoints[0].replace_local(component, value.unsqueeze(0)))
    return out


def redirect_gaze(
    model: CompositionalGenerator,
    w: LatentCode,
    new_gaze: GazeDirection,
    gaze_stats: Optional[np.ndarray] = None,
    clamp: bool = True,
) -> tuple[ImageMaskPair, GazeDirection]:
    """Re-render the latent under a new gaze; the new gaze is the annotation.

    Out-of-range targets are clamped to the training range with a warning
    (or rejected when ``clamp=False``).
    """
    gaze = GazeDirection.validate(new_gaze.yaw, new_gaze.pitch)
    if gaze_stats is not None and len(gaze_stats):
        lo = np.asarray(gaze_stats).min(axis=0)
        hi = np.asarray(gaze_stats).max(axis=0)
        clipped = GazeDirection(
            float(np.clip(gaze.yaw, lo[0], hi[0])), float(np.clip(gaze.pitch, lo[1], hi[1]))
        )
        if clipped != gaze:
            if not clamp:
                raise ContractError(f"gaze {gaze} outside the training range")
            warnings.warn(f"gaze {gaze} outside training range; clamped to {clipped}", stacklevel=2)
            gaze = clipped
    with torch.no_grad():
        pair = model.generate(w, gaze)
    return pair, gaze


def cross_domain_generate(
    w: LatentCode,
    gaze: GazeDirection,
    model_a: CompositionalGenerator,
    model_b: CompositionalGenerator,
) -> tuple[ImageMaskPair, ImageMaskPair, float]:
    """Generate the same (w, gaze) in both domains.

    Confidence is the negated mask MSE: identical masks give the maximal
    confidence 0, disagreement goes negative.
    """
    if model_a.cfg.components != model_b.cfg.components or model_a.cfg.w_dim != model_b.cfg.w_dim:
        raise ContractError("models do not share latent geometry")
    with torch.no_grad():
        pair_a = model_a.generate(w, gaze)
        pair_b = model_b.generate(w, gaze)
    confidence = -F.mse_loss(pair_a.mask, pair_b.mask).item()
    return pair_a, pair_b, confidence


def select_confident(
    scored: Sequence[tuple[str, float]], quota: float
) -> list[tuple[str, float]]:
    """Keep the top ``quota`` fraction by confidence; ties break by id."""
    if not (0.0 < quota <= 1.0):
        raise ContractError("quota must be in (0, 1]")
    take = int(len(scored) * quota)
    ranked = sorted(scored, key=lambda kv: (-kv[1], kv[0]))
    return ranked[:take]


# ---------------------------------------------------------------------------
# Plans and batch production


@dataclass
class PlanOp:
    """One augmentation instruction.

    op: "resample" (fresh slot draw), "redirect" (new gaze), or
    "cross_domain" (emit the stage-2 domain render of the same latent).
    """

    op: str
    source: str  # id of the inverted latent to start from
    component: Optional[str] = None
    gaze: Optional[tuple[float, float]] = None
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "op": self.op,
            "source": self.source,
            "component": self.component,
            "gaze": list(self.gaze) if self.gaze is not None else None,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "PlanOp":
        return PlanOp(
            op=d["op"],
            source=d["source"],
            component=d.get("component"),
            gaze=tuple(d["gaze"]) if d.get("gaze") else None,
            seed=d.get("seed", 0),
        )


@dataclass
class AugmentationPlan:
    """Serializable list of ops plus selection settings.

    ``confidence_quota`` applies to cross_domain ops only: of all such
    candidates, the top fraction by mask-agreement confidence is kept.
    """

    ops: list[PlanOp] = field(default_factory=list)
    seed: int = 0
    confidence_quota: float = 1.0

    def __post_init__(self) -> None:
        if not (0.0 < self.confidence_quota <= 1.0):
            raise ContractError("confidence quota must be in (0, 1]")

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": self.seed,
                "confidence_quota": self.confidence_quota,
                "ops": [op.to_dict() for op in self.ops],
            },
            indent=2,
            sort_keys=True,
        )

    @staticmethod
    def from_json(text: str) -> "AugmentationPlan":
        d = json.loads(text)
        return AugmentationPlan(
            ops=[PlanOp.from_dict(o) for o in d.get("ops", [])],
            seed=d.get("seed", 0),
            confidence_quota=d.get("confidence_quota", 1.0),
        )


def default_plan(
    latent_ids: Sequence[str],
    n_ops: int,
    seed: int,
    gaze_stats: np.ndarray,
    components: Sequence[str],
    redirect_fraction: float = 0.5,
    cross_domain: int = 0,
) -> AugmentationPlan:
    """Mix of unconditioned-component resampling and gaze redirection ops."""
    rng = np.random.default_rng(seed)
    editable = [c for c in components if c not in GAZE_COMPONENTS and c != "background"]
    ops: list[PlanOp] = []
    for i in range(n_ops):
        source = latent_ids[int(rng.integers(0, len(latent_ids)))]
        if rng.random() < redirect_fraction:
            gaze = gaze_stats[int(rng.integers(0, len(gaze_stats)))]
            ops.append(PlanOp(op="redirect", source=source, gaze=(float(gaze[0]), float(gaze[1])), seed=i))
        else:
            comp = editable[int(rng.integers(0, len(editable)))]
            ops.append(PlanOp(op="resample", source=source, component=comp, seed=seed * 100003 + i))
    for i in range(cross_domain):
        source = latent_ids[int(rng.integers(0, len(latent_ids)))]
        ops.append(PlanOp(op="cross_domain", source=source, seed=i))
    return AugmentationPlan(ops=ops, seed=seed)


@dataclass
class InvertedLatent:
    """An inverted sample: latent code plus the gaze it was embedded with."""

    id: str
    latent: LatentCode
    gaze: GazeDirection


def _save_pair(pair: ImageMaskPair, classes, out_dir: Path, sid: str) -> tuple[str, str]:
    img = pair.image_uint8()[0]
    Image.fromarray(img).save(out_dir / "images" / f"{sid}.png")
    save_mask_png(pair.hard_masks(classes)[0], out_dir / "masks" / f"{sid}.png")
    return f"images/{sid}.png", f"masks/{sid}.png"


def build_augmented_set(
    latents: dict[str, InvertedLatent],
    plan: AugmentationPlan,
    model: CompositionalGenerator,
    out_dir: str | Path,
    model_b: Optional[CompositionalGenerator] = None,
    gaze_stats: Optional[np.ndarray] = None,
    domain: str = "augmented",
) -> DatasetManifest:
    """Execute a plan and write the resulting annotated dataset.

    Each record's source field carries provenance: the op chain and the
    source latent id. Gaze labels always equal the gaze actually passed to
    the generator for that sample.
    """
    if not latents:
        raise ContractError("augmentation requires at least one inverted latent")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    classes = model.cfg.components

    manifest = DatasetManifest(root=out_dir)
    cross_candidates: list[tuple[str, float, SampleRecord]] = []
    for i, op in enumerate(plan.ops):
        if op.source not in latents:
            raise ContractError(f"plan op {i} references missing latent {op.source!r}")
        src = latents[op.source]
        sid = f"aug{i:06d}"
        if op.op == "resample":
            if op.component is None:
                raise ContractError(f"plan op {i}: resample requires a component")
            code = resample_component(model, src.latent, op.component, seed=op.seed)
            with torch.no_grad():
                pair = model.generate(code, src.gaze)
            gaze, provenance = src.gaze, f"aug:resample[{op.component}]<-{op.source}"
        elif op.op == "redirect":
            if op.gaze is None:
                raise ContractError(f"plan op {i}: redirect requires a gaze")
            pair, gaze = redirect_gaze(model, src.latent, GazeDirection(*op.gaze), gaze_stats)
            provenance = f"aug:redirect<-{op.source}"
        elif op.op == "cross_domain":
            if model_b is None:
                raise ContractError(f"plan op {i}: cross_domain requires a second model")
            _, pair, confidence = cross_domain_generate(src.latent, src.gaze, model, model_b)
            gaze = src.gaze
            image_path, mask_path = _save_pair(pair, classes, out_dir, sid)
            record = SampleRecord(
                id=sid, image_path=image_path, mask_path=mask_path,
                gaze=(gaze.yaw, gaze.pitch), domain=f"{domain}-cross",
                source=f"aug:cross_domain<-{op.source}",
            )
            cross_candidates.append((sid, confidence, record))
            continue
        else:
            raise ContractError(f"plan op {i}: unknown op {op.op!r}")
        image_path, mask_path = _save_pair(pair, classes, out_dir, sid)
        manifest.records.append(
            SampleRecord(
                id=sid, image_path=image_path, mask_path=mask_path,
                gaze=(gaze.yaw, gaze.pitch), domain=domain, source=provenance,
            )
        )

    if cross_candidates:
        keep = select_confident([(sid, conf) for sid, conf, _ in cross_candidates], plan.confidence_quota)
        kept_ids = {sid for sid, _ in keep}
        for sid, conf, record in cross_candidates:
            if sid in kept_ids:
                record.source += f"|confidence={conf:.6g}"
                manifest.records.append(record)

    manifest.records.sort(key=lambda r: r.id)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest
