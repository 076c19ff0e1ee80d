"""Latent-space embedding of real images by gradient-based optimization."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .core import GazeDirection
from .errors import ContractError, InversionDivergenceError
from .evaluation import FeatureExtractor
from .generator import CompositionalGenerator, LatentCode

log = logging.getLogger(__name__)


@dataclass
class InversionConfig:
    steps: int = 400
    lr: float = 0.05
    lambda_perceptual: float = 1.0
    lambda_pixel: float = 1.0
    lambda_latent: float = 0.01
    gaze_mode: str = "fixed"  # "fixed" when a label exists, else "optimized"
    mean_latent_samples: int = 4096
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps <= 0:
            raise ContractError("inversion requires steps > 0")
        for name in ("lambda_perceptual", "lambda_pixel", "lambda_latent"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be nonnegative")


@dataclass
class InversionReport:
    """Best-iterate losses; ``loss`` is the full optimized objective and
    ``recon_loss`` its image-fit portion (perceptual + pixel terms).
    ``per_sample`` carries the same quantities per batch element."""

    loss: float
    recon_loss: float
    pixel_mse: float
    perceptual: float
    latent_reg: float
    steps: int
    best_step: int
    restarts: int = 0
    perceptual_fallback: bool = False
    per_sample: Optional[dict[str, list[float]]] = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class InversionResult:
    latent: LatentCode
    gaze: GazeDirection
    report: InversionReport
    gazes: Optional[np.ndarray] = None  # per-sample gazes for batched runs


def mean_latent(model: CompositionalGenerator, n: int, seed: int = 0) -> LatentCode:
    """Average w over n random draws; the optimization anchor."""
    gen = torch.Generator(device="cpu").manual_seed(seed)
    return model.mean_latent(n, generator=gen)


def multiscale_pixel_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pixel MSE accumulated over a 3-level resolution pyramid."""
    total = F.mse_loss(a, b)
    for _ in range(2):
        a = F.avg_pool2d(a, 2)
        b = F.avg_pool2d(b, 2)
        total = total + F.mse_loss(a, b)
    return total / 3.0


def perceptual_distance(
    a: torch.Tensor, b: torch.Tensor, extractor: Optional[FeatureExtractor] = None
) -> torch.Tensor:
    """High-level similarity via a fixed feature extractor plug-in.

    Without an extractor, falls back to a multi-scale pixel distance (the
    fallback is recorded by callers that report it).
    """
    if a.shape != b.shape:
        raise ContractError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if extractor is None:
        return multiscale_pixel_distance(a, b)
    fa = extractor.features(a) if hasattr(extractor, "features") else extractor.extract(a)
    fb = extractor.features(b) if hasattr(extractor, "features") else extractor.extract(b)
    if isinstance(fa, np.ndarray):
        fa, fb = torch.from_numpy(fa), torch.from_numpy(fb)
    return F.mse_loss(fa, fb)


def _latent_reg(code_tensor: torch.Tensor, anchor: torch.Tensor) -> torch.Tensor:
    return (code_tensor - anchor).pow(2).mean()


def invert_batch(
    targets: torch.Tensor,
    gazes: Optional[torch.Tensor],
    model: CompositionalGenerator,
    cfg: InversionConfig,
    extractor: Optional[FeatureExtractor] = None,
    init: Optional[LatentCode] = None,
) -> InversionResult:
    """Optimize one latent code per target image, all in a single batch.

    Per-sample best iterates are tracked; with ``gaze_mode == "optimized"``
    the gaze angles are free variables initialized at zero.
    """
    n = targets.shape[0]
    if targets.ndim != 4 or targets.shape[1] != 3:
        raise ContractError("targets must be (N, 3, H, W) in [-1, 1]")
    if targets.shape[-1] != model.cfg.resolution:
        raise ContractError(f"targets must be at resolution {model.cfg.resolution}")
    fixed_gaze = cfg.gaze_mode == "fixed"
    if fixed_gaze and gazes is None:
        raise ContractError("fixed gaze mode requires gaze labels")

    anchor = mean_latent(model, cfg.mean_latent_samples, seed=cfg.seed)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)

    def run(start: LatentCode) -> tuple[dict, LatentCode, torch.Tensor, bool]:
        w = start.tensor.detach().clone().requires_grad_(True)
        if fixed_gaze:
            gaze_t = gazes.detach().clone().to(torch.float32)
            params = [w]
        else:
            gaze_t = torch.zeros(n, 2, requires_grad=True)
            params = [w, gaze_t]
        opt = torch.optim.Adam(params, lr=cfg.lr)

        best_loss = torch.full((n,), float("inf"))
        best_w = w.detach().clone()
        best_gaze = gaze_t.detach().clone()
        best_terms = {"pixel": torch.zeros(n), "perc": torch.zeros(n), "reg": torch.zeros(n)}
        best_step = torch.zeros(n, dtype=torch.long)
        initial_mean = None
        for step in range(cfg.steps):
            pair = model.generate(LatentCode(w, model.cfg.components), gaze_t)
            pixel = (pair.image - targets).pow(2).mean(dim=(1, 2, 3))
            if extractor is None:
                a, b = pair.image, targets
                perc = (a - b).pow(2).mean(dim=(1, 2, 3))
                for _ in range(2):
                    a = F.avg_pool2d(a, 2)
                    b = F.avg_pool2d(b, 2)
                    perc = perc + (a - b).pow(2).mean(dim=(1, 2, 3))
                perc = perc / 3.0
            else:
                fa = extractor.features(pair.image)
                fb = extractor.features(targets)
                perc = (fa - fb).pow(2).mean(dim=1)
            reg = (w - anchor.tensor).pow(2).mean(dim=(1, 2))
            loss_vec = cfg.lambda_perceptual * perc + cfg.lambda_pixel * pixel + cfg.lambda_latent * reg
            loss = loss_vec.mean()
            # "Initial" loss spans the first few steps so the optimizer
            # transient is included; the floor keeps near-perfect starts from
            # tripping the guard.
            if step < 3:
                initial_mean = max(initial_mean or 0.0, loss.item())
            elif loss.item() > 10.0 * max(initial_mean, 1e-3) or not torch.isfinite(loss):
                return {"diverged": True}, start, gaze_t.detach(), False

            with torch.no_grad():
                better = loss_vec < best_loss
                if better.any():
                    best_loss[better] = loss_vec[better].detach()
                    best_w[better] = w[better].detach()
                    best_gaze[better] = gaze_t[better].detach()
                    best_terms["pixel"][better] = pixel[better].detach()
                    best_terms["perc"][better] = perc[better].detach()
                    best_terms["reg"][better] = reg[better].detach()
                    best_step[better] = step
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        out = {
            "diverged": False,
            "loss": best_loss,
            "pixel": best_terms["pixel"],
            "perc": best_terms["perc"],
            "reg": best_terms["reg"],
            "best_step": int(best_step.max()),
        }
        return out, LatentCode(best_w, model.cfg.components), best_gaze, True

    start = init if init is not None else LatentCode(
        anchor.tensor.expand(n, -1, -1).contiguous(), model.cfg.components
    )
    restarts = 0
    result, code, gaze_t, ok = run(start)
    if result.get("diverged"):
        restarts = 1
        log.warning("inversion diverged; restarting from the mean latent")
        result, code, gaze_t, ok = run(
            LatentCode(anchor.tensor.expand(n, -1, -1).contiguous(), model.cfg.components)
        )
        if result.get("diverged") or not ok:
            raise InversionDivergenceError("inversion diverged twice")

    recon = (
        cfg.lambda_perceptual * result["perc"] + cfg.lambda_pixel * result["pixel"]
    )
    report = InversionReport(
        loss=result["loss"].mean().item(),
        recon_loss=recon.mean().item(),
        pixel_mse=result["pixel"].mean().item(),
        perceptual=result["perc"].mean().item(),
        latent_reg=result["reg"].mean().item(),
        steps=cfg.steps,
        best_step=result["best_step"],
        restarts=restarts,
        perceptual_fallback=extractor is None,
        per_sample={
            "loss": result["loss"].tolist(),
            "recon_loss": recon.tolist(),
            "pixel_mse": result["pixel"].tolist(),
        },
    )
    gaze_arr = gaze_t.detach().cpu().numpy()
    mean_gaze = GazeDirection(float(gaze_arr[:, 0].mean()), float(gaze_arr[:, 1].mean()))
    return InversionResult(latent=code, gaze=mean_gaze, report=report, gazes=gaze_arr)


def invert(
    target: torch.Tensor,
    gaze: Optional[GazeDirection],
    model: CompositionalGenerator,
    cfg: Optional[InversionConfig] = None,
    extractor: Optional[FeatureExtractor] = None,
) -> InversionResult:
    """Embed a single preprocessed image; gaze is held fixed when provided."""
    cfg = cfg or InversionConfig()
    if gaze is None and cfg.gaze_mode == "fixed":
        cfg = InversionConfig(**{**cfg.__dict__, "gaze_mode": "optimized"})
    if target.ndim == 3:
        target = target.unsqueeze(0)
    gazes = None
    if gaze is not None:
        gazes = torch.tensor([[gaze.yaw, gaze.pitch]], dtype=torch.float32)
    result = invert_batch(target, gazes, model, cfg, extractor)
    if gaze is not None:
        result.gaze = gaze
    return result
