"""Metrics: angular gaze error, distribution-level image quality (FID/IS),
redirection disentanglement, and cross-domain gaze consistency."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import linalg
from scipy.special import xlogy
from torch import nn

from .core import GazeDirection
from .errors import ContractError
from .generator import CompositionalGenerator
from .toyface import decode_gaze_from_mask

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Gaze geometry


def pitchyaw_to_vector(gaze: GazeDirection) -> np.ndarray:
    """Unit 3-vector in the normalized camera frame (forward gaze = (0,0,-1))."""
    y, p = gaze.yaw, gaze.pitch
    v = np.array([-math.cos(p) * math.sin(y), -math.sin(p), -math.cos(p) * math.cos(y)])
    return v / np.linalg.norm(v)


def vector_to_pitchyaw(v: np.ndarray) -> GazeDirection:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0:
        raise ContractError("cannot convert the zero vector to angles")
    v = v / n
    return GazeDirection(yaw=math.atan2(-v[0], -v[2]), pitch=math.asin(-v[1]))


def angular_error(g: np.ndarray, g_pred: np.ndarray) -> float:
    """Angle between two gaze vectors in degrees; scale invariant."""
    g = np.asarray(g, dtype=np.float64)
    g_pred = np.asarray(g_pred, dtype=np.float64)
    na, nb = np.linalg.norm(g), np.linalg.norm(g_pred)
    if na == 0 or nb == 0:
        raise ContractError("angular error undefined for zero vectors")
    cos = float(np.dot(g, g_pred) / (na * nb))
    return math.degrees(math.acos(max(-1.0, min(1.0, cos))))


def gaze_angular_error(a: GazeDirection, b: GazeDirection) -> float:
    return angular_error(pitchyaw_to_vector(a), pitchyaw_to_vector(b))


# ---------------------------------------------------------------------------
# Distribution metrics


def frechet_distance(
    mu1: np.ndarray, sigma1: np.ndarray, mu2: np.ndarray, sigma2: np.ndarray, eps: float = 1e-6
) -> float:
    """Closed-form Frechet distance between two Gaussians."""
    diff = mu1 - mu2
    covmean, _ = linalg.sqrtm(sigma1 @ sigma2, disp=False)
    if not np.isfinite(covmean).all():
        log.warning("singular covariance product; retrying with eps=%g on the diagonal", eps)
        offset = np.eye(sigma1.shape[0]) * eps
        covmean, _ = linalg.sqrtm((sigma1 + offset) @ (sigma2 + offset), disp=False)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    return float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * np.trace(covmean))


def fid(real_features: np.ndarray, fake_features: np.ndarray, eps: float = 1e-6) -> float:
    """Frechet distance between Gaussians fitted to two feature sets."""
    real_features = np.atleast_2d(np.asarray(real_features, dtype=np.float64))
    fake_features = np.atleast_2d(np.asarray(fake_features, dtype=np.float64))
    if len(real_features) < 2 or len(fake_features) < 2:
        raise ContractError("fid requires at least 2 samples per set")
    mu1, mu2 = real_features.mean(axis=0), fake_features.mean(axis=0)
    s1 = np.cov(real_features, rowvar=False)
    s2 = np.cov(fake_features, rowvar=False)
    s1, s2 = np.atleast_2d(s1), np.atleast_2d(s2)
    return frechet_distance(mu1, s1, mu2, s2, eps=eps)


def inception_score(probs: np.ndarray) -> float:
    """exp(E_x KL(p(y|x) || p(y))) over a set of class-probability rows."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ContractError("probability input must be (N, C)")
    if (probs < -1e-9).any() or not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6):
        raise ContractError("rows must be probability distributions")
    marginal = probs.mean(axis=0)
    kl = (xlogy(probs, probs) - xlogy(probs, marginal[None, :])).sum(axis=1)
    return float(np.exp(kl.mean()))


# ---------------------------------------------------------------------------
# Model-level metrics


def redirection_pixel_mae(
    generator: CompositionalGenerator,
    gaze_stats: np.ndarray,
    n_probes: int = 5,
    n_gazes: int = 32,
    seed: int = 0,
) -> float:
    """Mean |x(w, gaze0) - x(w, gaze_j)| on the 0..255 scale.

    Measures how much redirection disturbs the rest of the image; the
    grouped (gaze-aware components only) design should score lower than a
    fully conditioned one.
    """
    rng = np.random.default_rng(seed)
    torch_rng = torch.Generator().manual_seed(seed)
    stats = np.asarray(gaze_stats, dtype=np.float64)
    total, count = 0.0, 0
    generator.eval()
    with torch.no_grad():
        for _ in range(n_probes):
            z = torch.randn(1, generator.cfg.z_dim, generator=torch_rng)
            code = generator.map_latent(z)
            g0 = stats[rng.integers(0, len(stats))]
            base = generator.generate(code, torch.tensor([g0], dtype=torch.float32)).image
            sweep = stats[rng.integers(0, len(stats), size=n_gazes)]
            for gj in sweep:
                img = generator.generate(code, torch.tensor([gj], dtype=torch.float32)).image
                total += (img - base).abs().mean().item() * 127.5
                count += 1
    return total / count


@dataclass
class ConsistencyReport:
    """Cross-domain agreement for shared (latent, gaze) inputs."""

    mask_mse: list[float]
    decoded_delta_deg: list[float]

    def summary(self) -> dict:
        mm = np.array(self.mask_mse)
        out = {
            "mask_mse_mean": float(mm.mean()),
            "mask_mse_p90": float(np.percentile(mm, 90)),
            "n_probes": len(self.mask_mse),
        }
        if self.decoded_delta_deg:
            dd = np.array(self.decoded_delta_deg)
            out["decoded_delta_mean_deg"] = float(dd.mean())
            out["decoded_delta_p90_deg"] = float(np.percentile(dd, 90))
        return out

    def to_json_dict(self) -> dict:
        return {
            "mask_mse": self.mask_mse,
            "decoded_delta_deg": self.decoded_delta_deg,
            "summary": self.summary(),
        }


def gaze_consistency_report(
    gen_a: CompositionalGenerator,
    gen_b: CompositionalGenerator,
    gaze_stats: np.ndarray,
    n_probes: int = 100,
    seed: int = 0,
    decode: bool = True,
) -> ConsistencyReport:
    """Compare masks generated by two models from identical (w, gaze) draws."""
    if gen_a.cfg.components != gen_b.cfg.components or gen_a.cfg.w_dim != gen_b.cfg.w_dim:
        raise ContractError("models do not share latent geometry")
    rng = np.random.default_rng(seed)
    torch_rng = torch.Generator().manual_seed(seed)
    mask_mse: list[float] = []
    deltas: list[float] = []
    gen_a.eval()
    gen_b.eval()
    with torch.no_grad():
        for _ in range(n_probes):
            z = torch.randn(1, gen_a.cfg.z_dim, generator=torch_rng)
            gaze = torch.tensor([gaze_stats[rng.integers(0, len(gaze_stats))]], dtype=torch.float32)
            code_a = gen_a.map_latent(z)
            pair_a = gen_a.generate(code_a, gaze)
            pair_b = gen_b.generate(gen_b.map_latent(z), gaze)
            mask_mse.append(F.mse_loss(pair_a.mask, pair_b.mask).item())
            if decode:
                try:
                    da = decode_gaze_from_mask(pair_a.hard_masks(gen_a.cfg.components)[0])
                    db = decode_gaze_from_mask(pair_b.hard_masks(gen_b.cfg.components)[0])
                    deltas.append(gaze_angular_error(da, db))
                except ContractError:
                    pass
    return ConsistencyReport(mask_mse=mask_mse, decoded_delta_deg=deltas)


# ---------------------------------------------------------------------------
# Small task networks (toy-scale substitutes for large pretrained models)


class FeatureExtractor(Protocol):
    """Opaque plug-in mapping image batches to feature rows."""

    def extract(self, images: torch.Tensor) -> np.ndarray: ...


class ToyFeatureNet(nn.Module):
    """Small conv classifier; penultimate pooling features back FID, class
    probabilities back the inception-style score at desk scale."""

    def __init__(self, num_classes: int = 8, width: int = 32):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, width * 2, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(width * 2, width * 2, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
        )
        self.head = nn.Linear(width * 2, num_classes)
        self.num_classes = num_classes

    def features(self, images: torch.Tensor) -> torch.Tensor:
        x = self.body(images)
        return x.mean(dim=(2, 3))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(images))

    @torch.no_grad()
    def extract(self, images: torch.Tensor) -> np.ndarray:
        self.eval()
        return self.features(images).cpu().numpy()

    @torch.no_grad()
    def class_probs(self, images: torch.Tensor) -> np.ndarray:
        self.eval()
        return torch.softmax(self(images), dim=1).cpu().numpy()


def train_toy_feature_net(
    images: torch.Tensor, labels: torch.Tensor, num_classes: int, epochs: int = 5,
    batch_size: int = 32, lr: float = 2e-3, seed: int = 0,
) -> ToyFeatureNet:
    torch.manual_seed(seed)
    net = ToyFeatureNet(num_classes=num_classes)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    n = images.shape[0]
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = torch.from_numpy(order[start : start + batch_size])
            logits = net(images[idx])
            loss = F.cross_entropy(logits, labels[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    net.eval()
    return net


class TinyGazeRegressor(nn.Module):
    """Compact conv regressor predicting (yaw, pitch) from an eye-region image."""

    def __init__(self, width: int = 24):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, width * 2, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(width * 2, width * 4, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(width * 4, width * 4, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
        )
        self.head = nn.Linear(width * 4, 2)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.body(images).mean(dim=(2, 3)))


def train_gaze_regressor(
    images: torch.Tensor, gazes: torch.Tensor, epochs: int = 8, batch_size: int = 32,
    lr: float = 1e-3, seed: int = 0,
) -> TinyGazeRegressor:
    torch.manual_seed(seed)
    net = TinyGazeRegressor()
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    n = images.shape[0]
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = torch.from_numpy(order[start : start + batch_size])
            pred = net(images[idx])
            loss = F.l1_loss(pred, gazes[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    net.eval()
    return net


@torch.no_grad()
def regressor_angular_error(net: TinyGazeRegressor, images: torch.Tensor, gazes: torch.Tensor) -> float:
    """Mean 3-D angular error of regressor predictions, in degrees."""
    net.eval()
    preds = net(images).cpu().numpy()
    errs = [
        gaze_angular_error(GazeDirection(*gazes[i].tolist()), GazeDirection(*preds[i].tolist()))
        for i in range(len(preds))
    ]
    return float(np.mean(errs))
