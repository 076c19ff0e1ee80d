"""Discriminator branch topology, minibatch stddev, conditioning wiring."""
from __future__ import annotations

import pytest
import torch

from gcgan.config import toy_model_config
from gcgan.core import seed_everything
from gcgan.discriminator import GazeDiscriminator, minibatch_stddev
from gcgan.errors import ContractError


@pytest.fixture()
def disc():
    seed_everything(11)
    return GazeDiscriminator(toy_model_config(), conditioned=True)


def _inputs(n=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    img = torch.randn(n, 3, 64, 64, generator=g).clamp(-1, 1)
    mask = torch.softmax(torch.randn(n, 6, 64, 64, generator=g), dim=1)
    gaze = torch.randn(n, 2, generator=g) * 0.3
    return img, mask, gaze


class TestScoreLabeled:
    def test_batch_of_logits(self, disc):
        img, mask, gaze = _inputs(8)
        out = disc.score_labeled(img, mask, gaze)
        assert out.shape == (8,)
        assert torch.isfinite(out).all()

    def test_swapped_branches_differ(self, disc):
        img, mask, gaze = _inputs(4)
        # Feed mask-shaped data into the image branch and vice versa.
        fake_img = mask[:, :3]
        fake_mask = torch.cat([img, img], dim=1).clamp(0, 1)
        s1 = disc.score_labeled(fake_img, fake_mask, gaze)
        s2 = disc.score_labeled(fake_mask[:, :3], torch.cat([fake_img, fake_img], dim=1), gaze)
        assert not torch.allclose(s1, s2)

    def test_resolution_mismatch(self, disc):
        with pytest.raises(ContractError):
            disc.score_labeled(torch.zeros(1, 3, 32, 32), torch.zeros(1, 6, 32, 32), torch.zeros(1, 2))

    def test_score_depends_on_gaze(self, disc):
        img, mask, _ = _inputs(2)
        gaze = torch.zeros(2, 2, requires_grad=True)
        score = disc.score_labeled(img, mask, gaze).sum()
        (grad,) = torch.autograd.grad(score, gaze)
        assert grad.abs().sum() > 0

    def test_r1_readiness(self, disc):
        img, mask, gaze = _inputs(4)
        img.requires_grad_(True)
        score = disc.score_labeled(img, mask, gaze).sum()
        (grad,) = torch.autograd.grad(score, img, create_graph=True)
        assert torch.isfinite(grad).all()


class TestScoreUnlabeled:
    def test_no_gaze_branch_parameters(self):
        disc2 = GazeDiscriminator(toy_model_config(), conditioned=False)
        assert not any("gaze" in name for name, _ in disc2.named_parameters())

    def test_batch_of_logits(self):
        disc2 = GazeDiscriminator(toy_model_config(), conditioned=False)
        img, mask, _ = _inputs(8)
        assert disc2.score_unlabeled(img, mask).shape == (8,)

    def test_deterministic_in_eval(self):
        disc2 = GazeDiscriminator(toy_model_config(), conditioned=False)
        disc2.eval()
        img, mask, _ = _inputs(3)
        assert torch.equal(disc2.score_unlabeled(img, mask), disc2.score_unlabeled(img, mask))

    def test_conditioned_api_mismatch(self, disc):
        img, mask, gaze = _inputs(2)
        with pytest.raises(ContractError):
            disc.score_unlabeled(img, mask)
        disc2 = GazeDiscriminator(toy_model_config(), conditioned=False)
        with pytest.raises(ContractError):
            disc2.score_labeled(img, mask, gaze)


class TestMinibatchStdDev:
    def test_identical_batch_zero_channel(self):
        x = torch.randn(1, 8, 4, 4).expand(6, -1, -1, -1).contiguous()
        out = minibatch_stddev(x)
        assert out.shape == (6, 9, 4, 4)
        assert out[:, -1].abs().max() < 1e-3

    def test_single_sample_zero(self):
        out = minibatch_stddev(torch.randn(1, 8, 4, 4))
        assert torch.equal(out[:, -1], torch.zeros(1, 4, 4))

    def test_two_sample_closed_form(self):
        a, b = 1.0, 3.0
        x = torch.tensor([[[[a]]], [[[b]]]])  # (2, 1, 1, 1)
        out = minibatch_stddev(x)
        # Population stddev of {1, 3} is 1.
        assert out[:, -1].flatten().tolist() == pytest.approx([1.0, 1.0], abs=1e-4)
