"""Toy renderer determinism, mask exactness, and the decode oracle."""
from __future__ import annotations

import json
import math

import numpy as np
import pytest
from scipy import stats as scipy_stats

from gcgan.core import FACE_COMPONENTS, GazeDirection, SegMask
from gcgan.errors import ContractError
from gcgan.toyface import (
    IRIS_OFFSET_GAIN,
    ToyFaceParams,
    decode_gaze_from_mask,
    load_oracle_gazes,
    render_toy,
    sample_params,
    synth_corpus,
)


def _disk(grid: np.ndarray, cx: float, cy: float, r: float, value: int) -> None:
    ys, xs = np.mgrid[: grid.shape[0], : grid.shape[1]]
    grid[(xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2 <= r * r] = value


class TestRenderer:
    def test_centered_gaze_centers_iris(self):
        _, mask, lm, _ = render_toy(ToyFaceParams(gaze=GazeDirection(0.0, 0.0)), 256)
        for side in ("left", "right"):
            eye = lm.points[f"{side}_eye"].mean(axis=0)
            iris = lm.points[f"{side}_iris"].mean(axis=0)
            assert np.abs(eye - iris).max() < 0.5

    def test_fixed_seed_byte_identical(self):
        p = sample_params(np.random.default_rng(4), "B", seed=77)
        img1, mask1, _, _ = render_toy(p, 128)
        img2, mask2, _, _ = render_toy(p, 128)
        assert np.array_equal(img1, img2)
        assert np.array_equal(mask1.grid, mask2.grid)

    def test_mask_classes_disjoint_exhaustive(self):
        _, mask, _, _ = render_toy(ToyFaceParams(), 128)
        one_hot = mask.one_hot()
        assert np.array_equal(one_hot.sum(axis=0), np.ones(mask.grid.shape, dtype=np.float32))

    def test_iris_never_clips_sclera(self):
        with pytest.raises(ContractError):
            ToyFaceParams(sclera_radius=0.05, iris_radius=0.049)


class TestDecodeOracle:
    def test_round_trip_grid(self):
        errs = []
        for yaw in np.linspace(-0.4, 0.4, 9):
            for pitch in np.linspace(-0.4, 0.4, 9):
                p = ToyFaceParams(gaze=GazeDirection(float(yaw), float(pitch)), seed=3)
                _, mask, _, _ = render_toy(p, 320)
                dec = decode_gaze_from_mask(mask)
                errs.append(math.degrees(math.hypot(dec.yaw - yaw, dec.pitch - pitch)))
        assert max(errs) <= 1.0

    def test_centered_iris_decodes_to_zero(self):
        grid = np.zeros((64, 64), dtype=np.uint8)
        classes = ("background", "face", "iris", "sclera", "eyebrows", "nose")
        _disk(grid, 32, 32, 12, classes.index("sclera"))
        _disk(grid, 32, 32, 5, classes.index("iris"))
        dec = decode_gaze_from_mask(SegMask(grid, classes))
        assert abs(dec.yaw) < 0.02 and abs(dec.pitch) < 0.02

    def test_single_eye_fallback(self):
        p = ToyFaceParams(gaze=GazeDirection(0.2, -0.1), seed=3)
        _, mask, lm, _ = render_toy(p, 256)
        grid = mask.grid.copy()
        # Occlude the right eye entirely.
        right = lm.points["right_eye"]
        x0 = int(right[:, 0].min()) - 2
        grid[:, x0:] = np.where(
            np.isin(grid[:, x0:], [mask.class_index("iris"), mask.class_index("sclera")]),
            mask.class_index("face"),
            grid[:, x0:],
        )
        dec = decode_gaze_from_mask(SegMask(grid, mask.classes))
        assert math.degrees(abs(dec.yaw - 0.2)) < 2.0

    def test_missing_classes_raise(self):
        grid = np.zeros((32, 32), dtype=np.uint8)
        with pytest.raises(ContractError):
            decode_gaze_from_mask(SegMask(grid, FACE_COMPONENTS))


class TestSynthCorpus:
    def test_labeled_style_a(self, tmp_path):
        manifest = synth_corpus(tmp_path, n=20, seed=1, domain_style="A")
        assert len(manifest) == 20
        assert all(r.gaze is not None for r in manifest)

    def test_style_b_withholds_gaze_with_sidecar(self, tmp_path):
        manifest = synth_corpus(tmp_path, n=8, seed=2, domain_style="B")
        assert all(r.gaze is None for r in manifest)
        oracle = load_oracle_gazes(tmp_path)
        assert set(oracle) == {r.id for r in manifest}

    def test_color_histograms_differ(self, tmp_path):
        from PIL import Image

        man_a = synth_corpus(tmp_path / "a", n=24, seed=3, domain_style="A")
        man_b = synth_corpus(tmp_path / "b", n=24, seed=3, domain_style="B")

        def hist(man):
            acc = np.zeros(48)
            for rec in man:
                arr = np.asarray(Image.open(man.resolve(rec.image_path)))
                for c in range(3):
                    acc[c * 16 : (c + 1) * 16] += np.histogram(arr[..., c], bins=16, range=(0, 256))[0]
            return acc

        ha, hb = hist(man_a), hist(man_b)
        hb_scaled = hb * (ha.sum() / hb.sum())
        keep = (ha + hb_scaled) > 0
        chi2 = ((ha - hb_scaled) ** 2 / (ha + hb_scaled))[keep].sum()
        # Equality would put chi2 near the dof (~47); the style gap is far larger.
        assert chi2 > 10 * scipy_stats.chi2.ppf(0.999, keep.sum() - 1)
