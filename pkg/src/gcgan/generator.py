"""Compositional generator: latent mapping, gaze-aware local generators,
pseudo-depth fusion and the rendering network."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .core import GazeDirection, SegMask
from .errors import ContractError
from .layers import (
    EqualizedConv2d,
    EqualizedLinear,
    ModulatedConv1x1,
    ResidualUpBlock,
    fourier_grid,
)


@dataclass
class LatentCode:
    """Intermediate latent state: a base slot plus one slot per component.

    ``tensor`` has shape (B, K+1, w_dim): slot 0 is the base code shared by
    all components, slots 1..K follow the model's component order. Each
    component slot splits into a shape half and a texture half.
    """

    tensor: torch.Tensor
    components: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.tensor.ndim != 3 or self.tensor.shape[1] != len(self.components) + 1:
            raise ContractError(
                f"latent tensor shape {tuple(self.tensor.shape)} does not match "
                f"{len(self.components)} components plus base"
            )
        if not torch.isfinite(self.tensor).all():
            raise ContractError("latent code contains non-finite values")

    @property
    def batch_size(self) -> int:
        return self.tensor.shape[0]

    @property
    def w_dim(self) -> int:
        return self.tensor.shape[2]

    def slot_index(self, component: str) -> int:
        return self.components.index(component) + 1

    @property
    def base(self) -> torch.Tensor:
        return self.tensor[:, 0]

    def local(self, component: str) -> torch.Tensor:
        return self.tensor[:, self.slot_index(component)]

    def shape_half(self, component: str) -> torch.Tensor:
        return self.local(component)[:, : self.w_dim // 2]

    def texture_half(self, component: str) -> torch.Tensor:
        return self.local(component)[:, self.w_dim // 2 :]

    def clone(self) -> "LatentCode":
        return LatentCode(self.tensor.clone(), self.components)

    def detach(self) -> "LatentCode":
        return LatentCode(self.tensor.detach(), self.components)

    def select(self, idx) -> "LatentCode":
        t = self.tensor[idx]
        if t.ndim == 2:
            t = t.unsqueeze(0)
        return LatentCode(t, self.components)

    def replace_local(self, component: str, value: torch.Tensor, part: str = "both") -> "LatentCode":
        """Copy-on-write replacement of one component slot (or one half of it)."""
        out = self.tensor.clone()
        k = self.slot_index(component)
        half = self.w_dim // 2
        if part == "both":
            out[:, k] = value
        elif part == "shape":
            out[:, k, :half] = value
        elif part == "texture":
            out[:, k, half:] = value
        else:
            raise ContractError(f"unknown slot part {part!r}")
        return LatentCode(out, self.components)

    def to_json(self) -> str:
        """Serialize a single-sample code as JSON (base + named locals)."""
        if self.batch_size != 1:
            raise ContractError("JSON serialization is defined for single-sample codes")
        half = self.w_dim // 2
        payload = {
            "w_dim": self.w_dim,
            "components": list(self.components),
            "base": self.base[0].tolist(),
            "locals": {
                name: {
                    "shape": self.local(name)[0, :half].tolist(),
                    "texture": self.local(name)[0, half:].tolist(),
                }
                for name in self.components
            },
        }
        return json.dumps(payload, sort_keys=True)

    @staticmethod
    def from_json(text: str, device: Union[str, torch.device] = "cpu") -> "LatentCode":
        payload = json.loads(text)
        components = tuple(payload["components"])
        w_dim = int(payload["w_dim"])
        t = torch.zeros(1, len(components) + 1, w_dim, device=device)
        t[0, 0] = torch.tensor(payload["base"])
        for i, name in enumerate(components):
            entry = payload["locals"][name]
            t[0, i + 1, : w_dim // 2] = torch.tensor(entry["shape"])
            t[0, i + 1, w_dim // 2 :] = torch.tensor(entry["texture"])
        return LatentCode(t, components)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @staticmethod
    def load(path: str | Path, device: Union[str, torch.device] = "cpu") -> "LatentCode":
        return LatentCode.from_json(Path(path).read_text(), device=device)


@dataclass
class ComponentFeatures:
    """Output of one local generator: pseudo-depth map and feature map."""

    pseudo_depth: torch.Tensor  # (B, 1, r, r)
    features: torch.Tensor  # (B, C, r, r)


@dataclass
class ImageMaskPair:
    """Generated image in [-1, 1] plus a per-pixel soft class mask."""

    image: torch.Tensor  # (B, 3, H, W)
    mask: torch.Tensor  # (B, K, H, W), channels sum to 1

    def hard_masks(self, classes: tuple[str, ...]) -> list[SegMask]:
        grids = self.mask.argmax(dim=1).cpu().numpy().astype(np.uint8)
        return [SegMask(g, classes) for g in grids]

    def image_uint8(self) -> np.ndarray:
        """(B, H, W, 3) uint8 view on the 0..255 scale."""
        arr = ((self.image.detach().cpu().numpy() + 1.0) * 127.5).clip(0, 255)
        return arr.transpose(0, 2, 3, 1).astype(np.uint8)


class MappingNetwork(nn.Module):
    """8-layer MLP taking a normalized noise vector to the w space."""

    def __init__(self, z_dim: int, w_dim: int, layers: int, lr_mul: float = 0.01):
        super().__init__()
        dims = [z_dim] + [w_dim] * layers
        self.layers = nn.ModuleList(
            EqualizedLinear(dims[i], dims[i + 1], lr_mul=lr_mul) for i in range(layers)
        )
        self.act = nn.LeakyReLU(0.2)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        x = z * torch.rsqrt(z.pow(2).mean(dim=1, keepdim=True) + 1e-8)
        for layer in self.layers:
            x = self.act(layer(x))
        return x


class GazeEmbedding(nn.Module):
    """Single fully connected map from (yaw, pitch) to the fusion space.

    Inputs are standardized by a fixed gain so the angle scale (a fraction
    of a radian) lands near unit variance before the linear map.
    """

    def __init__(self, out_dim: int, input_gain: float = 4.0):
        super().__init__()
        self.fc = EqualizedLinear(2, out_dim)
        self.act = nn.LeakyReLU(0.2)
        self.input_gain = input_gain

    @property
    def bias(self) -> torch.Tensor:
        return self.fc.bias

    def forward(self, gaze: torch.Tensor) -> torch.Tensor:
        if gaze.ndim != 2 or gaze.shape[1] != 2:
            raise ContractError(f"gaze batch must have shape (N, 2), got {tuple(gaze.shape)}")
        if not torch.isfinite(gaze).all():
            raise ContractError("gaze contains non-finite values")
        return self.act(self.fc(gaze * self.input_gain))


class LocalGenerator(nn.Module):
    """Per-component generator over the Fourier positional grid.

    A stack of modulated 1x1 convolutions: the first layers are modulated by
    the base code, then a shape-conditioned stage emits the pseudo-depth and
    a texture-conditioned stage emits the feature map. For gaze-aware
    components the gaze embedding is concatenated to both the shape and the
    texture style vectors before modulation.
    """

    def __init__(self, cfg: ModelConfig, conditioned: bool):
        super().__init__()
        self.conditioned = conditioned
        half = cfg.half_dim
        gaze_extra = cfg.gaze_embed_dim if conditioned else 0
        hidden = cfg.local_hidden
        in_ch = 4 * cfg.fourier_freqs

        self.base_convs = nn.ModuleList()
        for i in range(cfg.base_layers):
            self.base_convs.append(ModulatedConv1x1(in_ch if i == 0 else hidden, hidden, cfg.w_dim))
        self.shape_convs = nn.ModuleList(
            ModulatedConv1x1(hidden, hidden, half + gaze_extra) for _ in range(cfg.shape_layers)
        )
        self.texture_convs = nn.ModuleList(
            ModulatedConv1x1(hidden, hidden, half + gaze_extra) for _ in range(cfg.texture_layers)
        )
        self.depth_head = EqualizedConv2d(hidden, 1, 1)
        self.feature_head = EqualizedConv2d(hidden, cfg.feature_channels, 1)
        self.act = nn.LeakyReLU(0.2)

    def forward(
        self,
        grid: torch.Tensor,
        base: torch.Tensor,
        shape_code: torch.Tensor,
        texture_code: torch.Tensor,
        gaze_feat: Optional[torch.Tensor] = None,
    ) -> ComponentFeatures:
        if self.conditioned and gaze_feat is None:
            raise ContractError("gaze-aware component requires a gaze feature")
        if not self.conditioned and gaze_feat is not None:
            raise ContractError("gaze feature supplied to an unconditioned component")
        if gaze_feat is not None:
            shape_code = torch.cat([shape_code, gaze_feat], dim=1)
            texture_code = torch.cat([texture_code, gaze_feat], dim=1)

        x = grid.unsqueeze(0).expand(base.shape[0], -1, -1, -1)
        for conv in self.base_convs:
            x = self.act(conv(x, base))
        for conv in self.shape_convs:
            x = self.act(conv(x, shape_code))
        depth = self.depth_head(x)
        for conv in self.texture_convs:
            x = self.act(conv(x, texture_code))
        features = self.feature_head(x)
        return ComponentFeatures(pseudo_depth=depth, features=features)


def fuse(components: Sequence[ComponentFeatures]) -> tuple[torch.Tensor, torch.Tensor]:
    """Blend per-component features by softmax over pseudo-depths.

    Returns (coarse_feature, coarse_masks); masks sum to 1 per pixel and the
    feature map is the mask-weighted sum of component features.
    """
    depths = torch.cat([c.pseudo_depth for c in components], dim=1)  # (B, K, r, r)
    masks = torch.softmax(depths, dim=1)
    feature = torch.zeros_like(components[0].features)
    for k, comp in enumerate(components):
        feature = feature + masks[:, k : k + 1] * comp.features
    return feature, masks


class RenderNet(nn.Module):
    """Upsampling residual generator with image and mask-refinement heads."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        chans = cfg.render_channels
        self.input_conv = EqualizedConv2d(cfg.feature_channels, chans[0], 3, padding=1)
        self.blocks = nn.ModuleList(
            ResidualUpBlock(chans[i], chans[i + 1]) for i in range(len(chans) - 1)
        )
        self.to_rgb = EqualizedConv2d(chans[-1], 3, 1)
        self.to_seg = EqualizedConv2d(chans[-1], cfg.num_components, 1)
        self.act = nn.LeakyReLU(0.2)
        self.resolution = cfg.resolution

    def forward(self, coarse_feature: torch.Tensor, coarse_masks: torch.Tensor) -> ImageMaskPair:
        x = self.act(self.input_conv(coarse_feature))
        for block in self.blocks:
            x = block(x)
        image = torch.tanh(self.to_rgb(x))
        prior = F.interpolate(
            torch.log(coarse_masks + 1e-8), size=x.shape[-2:], mode="bilinear", align_corners=False
        )
        mask = torch.softmax(self.to_seg(x) + prior, dim=1)
        return ImageMaskPair(image=image, mask=mask)


class CompositionalGenerator(nn.Module):
    """Full generator mapping (z or w, gaze) to an image and soft mask."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.mapping = MappingNetwork(cfg.z_dim, cfg.w_dim, cfg.mapping_layers)
        self.gaze_embed = GazeEmbedding(cfg.gaze_embed_dim, cfg.gaze_input_gain)
        self.locals = nn.ModuleDict(
            {name: LocalGenerator(cfg, cfg.is_conditioned(name)) for name in cfg.components}
        )
        self.render = RenderNet(cfg)
        self.register_buffer(
            "grid", fourier_grid(cfg.coarse_resolution, cfg.fourier_freqs), persistent=False
        )

    # -- latent handling ---------------------------------------------------

    def map_latent(self, z: torch.Tensor) -> LatentCode:
        """Map noise to w and broadcast it into the base + per-component slots."""
        if z.ndim != 2 or z.shape[1] != self.cfg.z_dim:
            raise ContractError(f"z must have shape (N, {self.cfg.z_dim}), got {tuple(z.shape)}")
        if not torch.isfinite(z).all():
            raise ContractError("z contains non-finite values")
        w = self.mapping(z)
        t = w.unsqueeze(1).expand(-1, self.cfg.num_components + 1, -1).contiguous()
        return LatentCode(t, self.cfg.components)

    def sample_latent(self, n: int, generator: Optional[torch.Generator] = None) -> LatentCode:
        z = torch.randn(n, self.cfg.z_dim, generator=generator, device=self.grid.device)
        return self.map_latent(z)

    def _coerce_latent(self, latent: Union[LatentCode, torch.Tensor]) -> LatentCode:
        if isinstance(latent, LatentCode):
            if latent.components != self.cfg.components:
                raise ContractError("latent component table does not match model config")
            return latent
        if latent.ndim == 2 and latent.shape[1] == self.cfg.z_dim:
            return self.map_latent(latent)
        if latent.ndim == 3:
            return LatentCode(latent, self.cfg.components)
        raise ContractError(f"cannot interpret latent of shape {tuple(latent.shape)}")

    def _coerce_gaze(self, gaze, batch: int, dtype, device) -> torch.Tensor:
        if isinstance(gaze, GazeDirection):
            g = torch.tensor([[gaze.yaw, gaze.pitch]], dtype=dtype, device=device)
            return g.expand(batch, -1)
        g = torch.as_tensor(gaze, dtype=dtype, device=device)
        if g.ndim == 1:
            g = g.unsqueeze(0).expand(batch, -1)
        if g.shape != (batch, 2):
            raise ContractError(f"gaze batch shape {tuple(g.shape)} does not match batch {batch}")
        return g

    # -- generation --------------------------------------------------------

    def local_generate(
        self, component: str, latent: LatentCode, gaze_feat: Optional[torch.Tensor]
    ) -> ComponentFeatures:
        """Run one component generator; gaze_feat must be present exactly for
        the gaze-aware components."""
        if component not in self.cfg.components:
            raise ContractError(f"unknown component {component!r}")
        return self.locals[component](
            self.grid,
            latent.base,
            latent.shape_half(component),
            latent.texture_half(component),
            gaze_feat,
        )

    def components_forward(
        self, latent: LatentCode, gaze: torch.Tensor
    ) -> dict[str, ComponentFeatures]:
        gaze_feat = self.gaze_embed(gaze)
        out: dict[str, ComponentFeatures] = {}
        for name in self.cfg.components:
            feat = gaze_feat if self.cfg.is_conditioned(name) else None
            out[name] = self.local_generate(name, latent, feat)
        return out

    def generate(
        self,
        latent: Union[LatentCode, torch.Tensor],
        gaze,
        return_aux: bool = False,
    ):
        """Full composition: map -> local generators -> fuse -> render."""
        code = self._coerce_latent(latent)
        g = self._coerce_gaze(gaze, code.batch_size, code.tensor.dtype, code.tensor.device)
        comps = self.components_forward(code, g)
        ordered = [comps[name] for name in self.cfg.components]
        coarse_feature, coarse_masks = fuse(ordered)
        pair = self.render(coarse_feature, coarse_masks)
        if not return_aux:
            return pair
        aux = {
            "latent": code,
            "gaze": g,
            "components": comps,
            "coarse_feature": coarse_feature,
            "coarse_masks": coarse_masks,
        }
        return pair, aux

    def forward(self, latent, gaze):
        return self.generate(latent, gaze)

    @torch.no_grad()
    def mean_latent(self, n: int, generator: Optional[torch.Generator] = None) -> LatentCode:
        """Average of map_latent over n random z draws."""
        if n < 1:
            raise ContractError("mean_latent requires n >= 1")
        total = torch.zeros(1, self.cfg.num_components + 1, self.cfg.w_dim, device=self.grid.device)
        chunk = 1024
        done = 0
        while done < n:
            take = min(chunk, n - done)
            z = torch.randn(take, self.cfg.z_dim, generator=generator, device=self.grid.device)
            total += self.map_latent(z).tensor.sum(dim=0, keepdim=True)
            done += take
        return LatentCode(total / n, self.cfg.components)


MixChoice = Union[str, Mapping[str, str]]


def style_mix(w_a: LatentCode, w_b: LatentCode, plan: Mapping[str, MixChoice]) -> LatentCode:
    """Select per-slot (and per shape/texture half) between two latent codes.

    ``plan`` maps slot names ("base" or a component) to "a" / "b", or to a
    {"shape": ..., "texture": ...} pair. Unmentioned slots default to "a".
    """
    if w_a.components != w_b.components:
        raise ContractError("latent codes come from different component tables")
    if w_a.tensor.shape != w_b.tensor.shape:
        raise ContractError("latent codes have mismatched shapes")
    valid = set(w_a.components) | {"base"}
    unknown = set(plan) - valid
    if unknown:
        raise ContractError(f"mix plan references unknown slots: {sorted(unknown)}")

    def pick(choice: str, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if choice == "a":
            return a
        if choice == "b":
            return b
        raise ContractError(f"mix choice must be 'a' or 'b', got {choice!r}")

    out = w_a.tensor.clone()
    half = w_a.w_dim // 2
    for slot, choice in plan.items():
        idx = 0 if slot == "base" else w_a.slot_index(slot)
        a, b = w_a.tensor[:, idx], w_b.tensor[:, idx]
        if isinstance(choice, str):
            out[:, idx] = pick(choice, a, b)
        else:
            out[:, idx, :half] = pick(choice.get("shape", "a"), a[:, :half], b[:, :half])
            out[:, idx, half:] = pick(choice.get("texture", "a"), a[:, half:], b[:, half:])
    return LatentCode(out, w_a.components)


def random_mix_plan(
    components: Sequence[str], rng: torch.Generator
) -> dict[str, str]:
    """Mixing regularization plan: a random subset of slots comes from b."""
    names = ["base", *components]
    cut = int(torch.randint(1, len(names), (1,), generator=rng).item())
    order = torch.randperm(len(names), generator=rng).tolist()
    plan = {names[i]: ("b" if pos >= cut else "a") for pos, i in enumerate(order)}
    return plan
