"""Model and training configuration objects plus flat key-value loading."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .core import EYE_COMPONENTS, FACE_COMPONENTS, GAZE_COMPONENTS


@dataclass
class ModelConfig:
    """Static architecture description, persisted inside every checkpoint."""

    resolution: int = 256
    coarse_resolution: int = 16
    z_dim: int = 512
    w_dim: int = 512
    local_hidden: int = 64
    feature_channels: int = 512
    gaze_embed_dim: int = 64
    # Scale applied to raw (yaw, pitch) radians before the embedding layers;
    # brings the conditioning input to roughly unit variance.
    gaze_input_gain: float = 4.0
    fourier_freqs: int = 8
    base_layers: int = 2
    shape_layers: int = 2
    texture_layers: int = 2
    render_channels: tuple[int, ...] = (512, 256, 128, 64, 32)
    disc_channels: tuple[int, ...] = (64, 128, 256, 512, 512, 512, 512)
    mapping_layers: int = 8
    whole_face: bool = False
    components: tuple[str, ...] = EYE_COMPONENTS
    conditioned: tuple[str, ...] = tuple(sorted(GAZE_COMPONENTS))

    def __post_init__(self) -> None:
        if self.whole_face and "mouth" not in self.components:
            self.components = FACE_COMPONENTS
        self.components = tuple(self.components)
        self.conditioned = tuple(self.conditioned)
        unknown = set(self.conditioned) - set(self.components)
        if unknown:
            raise ValueError(f"conditioned components not in component table: {sorted(unknown)}")
        n_up = len(self.render_channels) - 1
        if self.coarse_resolution * (2**n_up) != self.resolution:
            raise ValueError(
                f"render pyramid mismatch: coarse {self.coarse_resolution} with "
                f"{n_up} up-blocks cannot reach resolution {self.resolution}"
            )
        if self.w_dim % 2 != 0:
            raise ValueError("w_dim must be even to split shape/texture halves")

    @property
    def num_components(self) -> int:
        return len(self.components)

    @property
    def half_dim(self) -> int:
        return self.w_dim // 2

    def is_conditioned(self, component: str) -> bool:
        return component in self.conditioned

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["components"] = list(self.components)
        d["conditioned"] = list(self.conditioned)
        d["render_channels"] = list(self.render_channels)
        d["disc_channels"] = list(self.disc_channels)
        return d

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "ModelConfig":
        kwargs = dict(d)
        for key in ("components", "conditioned", "render_channels", "disc_channels"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return ModelConfig(**kwargs)


def toy_model_config(**overrides: Any) -> ModelConfig:
    """Slim 64 x 64 profile used by the desk-scale pipeline and tests."""
    base = dict(
        resolution=64,
        coarse_resolution=8,
        feature_channels=128,
        render_channels=(128, 64, 32, 16),
        disc_channels=(24, 48, 96, 192, 256),
    )
    base.update(overrides)
    return ModelConfig(**base)


def fully_conditioned(cfg: ModelConfig) -> ModelConfig:
    """Variant where every local generator receives the gaze input."""
    return dataclasses.replace(cfg, conditioned=tuple(cfg.components))


@dataclass
class LossWeights:
    """Per-term loss weights; the stage-2 mask preservation term is gaze_mask."""

    adversarial: float = 1.0  # lambda_l
    r1: float = 10.0  # lambda_r
    path_length: float = 2.0  # lambda_p
    mask_consistency: float = 100.0  # lambda_m
    mask_coverage: float = 500.0  # lambda_s
    gaze_mask: float = 100.0  # lambda_g, stage 2 only

    def __post_init__(self) -> None:
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be nonnegative")


@dataclass
class TrainConfig:
    """Optimization schedule for either training stage."""

    steps: int = 5000
    batch_size: int = 8
    lr: float = 2e-3
    beta1: float = 0.0
    beta2: float = 0.99
    r1_interval: int = 16
    pl_interval: int = 4
    pl_decay: float = 0.01
    pl_batch_shrink: int = 2
    style_mix_prob: float = 0.9
    gaze_sampling: str = "empirical"  # or "uniform"
    ema_decay: float = 0.998
    # Matching-aware conditioning: real pairs with resampled (wrong) gazes are
    # scored as fakes, weighted by adversarial_weight * this factor. Forces
    # the discriminator to couple gaze with mask geometry; 0 disables.
    mismatch_weight: float = 0.5
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    freeze: tuple[str, ...] = ()  # stage-2 module ids
    log_every: int = 50
    checkpoint_every: int = 1000

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["freeze"] = list(self.freeze)
        return d

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "TrainConfig":
        kwargs = dict(d)
        if "weights" in kwargs and isinstance(kwargs["weights"], dict):
            kwargs["weights"] = LossWeights(**kwargs["weights"])
        if "freeze" in kwargs:
            kwargs["freeze"] = tuple(kwargs["freeze"])
        return TrainConfig(**kwargs)


_WEIGHT_KEYS = {f.name for f in dataclasses.fields(LossWeights)}


def load_flat_config(path: str | Path) -> tuple[TrainConfig, dict[str, Any]]:
    """Parse a flat ``key = value`` / ``key: value`` config file.

    Keys matching TrainConfig fields populate it (loss-weight names are
    routed into the nested weights); anything else is returned untouched for
    the caller (e.g. model overrides like ``resolution``).
    """
    text = Path(path).read_text()
    flat: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        for sep in ("=", ":"):
            if sep in line:
                key, val = line.split(sep, 1)
                break
        else:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        flat[key.strip()] = json.loads(val.strip()) if _looks_json(val.strip()) else val.strip()

    train_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    train_kwargs: dict[str, Any] = {}
    weight_kwargs: dict[str, Any] = {}
    extra: dict[str, Any] = {}
    for key, val in flat.items():
        if key in _WEIGHT_KEYS:
            weight_kwargs[key] = float(val)
        elif key in train_fields and key != "weights":
            train_kwargs[key] = val
        else:
            extra[key] = val
    if "freeze" in train_kwargs and isinstance(train_kwargs["freeze"], str):
        train_kwargs["freeze"] = tuple(x for x in train_kwargs["freeze"].split(",") if x)
    cfg = TrainConfig(**train_kwargs, weights=LossWeights(**weight_kwargs))
    return cfg, extra


def _looks_json(s: str) -> bool:
    try:
        json.loads(s)
        return True
    except (json.JSONDecodeError, ValueError):
        return False
