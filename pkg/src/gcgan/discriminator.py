"""Discriminator scoring (image, mask[, gaze]) tuples with dual conv branches."""
from __future__ import annotations

from typing import Optional

import torch
from torch import nn

from .config import ModelConfig
from .errors import ContractError
from .layers import EqualizedConv2d, EqualizedLinear, MiniBatchStdDev, ResidualDownBlock, minibatch_stddev

__all__ = ["GazeDiscriminator", "minibatch_stddev"]


class _Branch(nn.Module):
    """Residual conv trunk taking an input raster down to 4x4 features.

    The stem is a 3x3 conv so single-pixel structure (iris offsets) is
    visible before any downsampling.
    """

    def __init__(self, in_channels: int, chans: tuple[int, ...]):
        super().__init__()
        self.from_input = EqualizedConv2d(in_channels, chans[0], 3, padding=1)
        self.blocks = nn.Sequential(
            *[ResidualDownBlock(chans[i], chans[i + 1]) for i in range(len(chans) - 1)]
        )
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(self.act(self.from_input(x)))


class GazeDiscriminator(nn.Module):
    """Scores realism of (image, mask) pairs, optionally jointly with gaze.

    Image and mask go through separate residual branches whose 4x4 outputs
    are summed; a minibatch-stddev channel is appended, a 3x3 conv applied,
    and the flattened features (concatenated with a 64-d gaze feature when
    the discriminator is gaze-conditioned) feed the final linear layers.
    """

    def __init__(self, cfg: ModelConfig, conditioned: bool = True):
        super().__init__()
        self.cfg = cfg
        self.conditioned = conditioned
        chans = cfg.disc_channels
        n_down = len(chans) - 1
        if cfg.resolution // (2**n_down) != 4:
            raise ContractError(
                f"discriminator channel table {chans} does not reduce {cfg.resolution} to 4x4"
            )
        self.image_branch = _Branch(3, chans)
        self.mask_branch = _Branch(cfg.num_components, chans)
        self.mbstd = MiniBatchStdDev()
        self.final_conv = EqualizedConv2d(chans[-1] + 1, chans[-1], 3, padding=1)
        self.act = nn.LeakyReLU(0.2)
        flat = chans[-1] * 16
        if conditioned:
            self.gaze_fc = EqualizedLinear(2, cfg.gaze_embed_dim)
            self.gaze_input_gain = cfg.gaze_input_gain
            flat += cfg.gaze_embed_dim
        self.final_fc1 = EqualizedLinear(flat, chans[-1])
        self.final_fc2 = EqualizedLinear(chans[-1], 1)

    def _trunk(self, image: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if image.shape[-1] != self.cfg.resolution or mask.shape[-1] != self.cfg.resolution:
            raise ContractError(
                f"inputs must be at model resolution {self.cfg.resolution}, got "
                f"image {tuple(image.shape)} mask {tuple(mask.shape)}"
            )
        if mask.shape[1] != self.cfg.num_components:
            raise ContractError(f"mask must have {self.cfg.num_components} channels")
        # Masks arrive in [0, 1]; rescale to the image branch's [-1, 1] range.
        feats = self.image_branch(image) + self.mask_branch(mask * 2.0 - 1.0)
        feats = self.mbstd(feats)
        feats = self.act(self.final_conv(feats))
        return feats.reshape(feats.shape[0], -1)

    def score_labeled(self, image: torch.Tensor, mask: torch.Tensor, gaze: torch.Tensor) -> torch.Tensor:
        """Logit for the joint (image, mask, gaze) distribution."""
        if not self.conditioned:
            raise ContractError("this discriminator has no gaze branch")
        if gaze.ndim != 2 or gaze.shape[1] != 2:
            raise ContractError(f"gaze batch must be (N, 2), got {tuple(gaze.shape)}")
        flat = self._trunk(image, mask)
        g = self.act(self.gaze_fc(gaze * self.gaze_input_gain))
        x = torch.cat([flat, g], dim=1)
        return self.final_fc2(self.act(self.final_fc1(x))).squeeze(1)

    def score_unlabeled(self, image: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Logit for an (image, mask) pair; identical trunk, no gaze concat."""
        if self.conditioned:
            raise ContractError("gaze-conditioned discriminator requires score_labeled")
        flat = self._trunk(image, mask)
        return self.final_fc2(self.act(self.final_fc1(flat))).squeeze(1)

    def forward(self, image: torch.Tensor, mask: torch.Tensor, gaze: Optional[torch.Tensor] = None) -> torch.Tensor:
        if self.conditioned:
            if gaze is None:
                raise ContractError("gaze-conditioned discriminator requires a gaze input")
            return self.score_labeled(image, mask, gaze)
        if gaze is not None:
            raise ContractError("unconditioned discriminator accepts no gaze input")
        return self.score_unlabeled(image, mask)
