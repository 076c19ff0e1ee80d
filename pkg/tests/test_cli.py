"""CLI surface: preprocess/toygen round trips and evaluation reports."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
import torch
from click.testing import CliRunner

from gcgan.checkpoint import ModelBundle, save_bundle
from gcgan.cli import main
from gcgan.config import toy_model_config
from gcgan.core import seed_everything
from gcgan.generator import CompositionalGenerator


@pytest.fixture()
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def random_bundle_path(tmp_path_factory):
    seed_everything(8)
    gen = CompositionalGenerator(toy_model_config())
    bundle = ModelBundle(
        config=gen.cfg, stage="stage1", step=0, generator_state=gen.state_dict(),
        extra_arrays={"gaze_stats": np.random.default_rng(0).uniform(-0.4, 0.4, (64, 2))},
    )
    path = tmp_path_factory.mktemp("cli") / "model.gcgn"
    save_bundle(bundle, path)
    return path


def test_toygen_and_preprocess_round_trip(runner, tmp_path):
    raw = tmp_path / "raw"
    out = tmp_path / "data"
    r1 = runner.invoke(main, ["toygen", "--out", str(raw), "--n", "6", "--seed", "3",
                              "--style", "A", "--raw"])
    assert r1.exit_code == 0, r1.output
    r2 = runner.invoke(main, ["preprocess", "--raw", str(raw), "--out", str(out),
                              "--size", "64", "--mode", "eyes", "--domain", "toy-A"])
    assert r2.exit_code == 0, r2.output
    assert "wrote 6 samples" in r2.output
    manifest_lines = (out / "manifest.jsonl").read_text().splitlines()
    assert len(manifest_lines) == 6
    rec = json.loads(manifest_lines[0])
    assert set(rec) == {"id", "image_path", "mask_path", "gaze", "domain", "source"}


def test_toygen_processed_mode(runner, tmp_path):
    out = tmp_path / "proc"
    res = runner.invoke(main, ["toygen", "--out", str(out), "--n", "5", "--seed", "1"])
    assert res.exit_code == 0, res.output
    assert (out / "manifest.jsonl").exists()
    assert len(list((out / "images").glob("*.png"))) == 5


def test_evaluate_gaze_report(runner, tmp_path):
    out_dir = tmp_path / "data"
    res = runner.invoke(main, ["toygen", "--out", str(out_dir), "--n", "12", "--seed", "2"])
    assert res.exit_code == 0
    report = tmp_path / "report.json"
    res = runner.invoke(main, ["evaluate", "--metric", "gaze", "--fake", str(out_dir),
                               "--out", str(report)])
    assert res.exit_code == 0, res.output
    payload = json.loads(report.read_text())
    # The toy corpus masks are exact, so decoding them nearly recovers labels.
    assert payload["mean_error_deg"] < 2.0
    assert report.with_suffix(".csv").exists()
    assert report.with_suffix(".scatter.png").exists()
    assert report.with_suffix(".hist.png").exists()


def test_evaluate_mae_report(runner, tmp_path, random_bundle_path):
    report = tmp_path / "mae.json"
    res = runner.invoke(main, ["evaluate", "--metric", "mae", "--models", str(random_bundle_path),
                               "--out", str(report)])
    assert res.exit_code == 0, res.output
    payload = json.loads(report.read_text())
    assert payload["metric"] == "redirection_pixel_mae"
    assert np.isfinite(payload["value"])


def test_evaluate_consistency_report(runner, tmp_path, random_bundle_path):
    report = tmp_path / "cons.json"
    res = runner.invoke(main, [
        "evaluate", "--metric", "consistency",
        "--models", f"{random_bundle_path},{random_bundle_path}",
        "--out", str(report),
    ])
    assert res.exit_code == 0, res.output
    payload = json.loads(report.read_text())
    assert payload["summary"]["mask_mse_mean"] == pytest.approx(0.0, abs=1e-12)


def test_evaluate_fid_is_reports(runner, tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    for out, seed in ((a, 5), (b, 6)):
        assert runner.invoke(main, ["toygen", "--out", str(out), "--n", "16",
                                    "--seed", str(seed)]).exit_code == 0
    rep = tmp_path / "fid.json"
    res = runner.invoke(main, ["evaluate", "--metric", "fid", "--real", str(a), "--fake", str(b),
                               "--out", str(rep), "--seed", "0"])
    assert res.exit_code == 0, res.output
    assert np.isfinite(json.loads(rep.read_text())["value"])
    rep2 = tmp_path / "is.json"
    res = runner.invoke(main, ["evaluate", "--metric", "is", "--real", str(a), "--fake", str(b),
                               "--out", str(rep2), "--seed", "0"])
    assert res.exit_code == 0, res.output
    value = json.loads(rep2.read_text())["value"]
    assert 1.0 <= value <= 8.0


def test_invert_cli(runner, tmp_path, random_bundle_path):
    data = tmp_path / "data"
    assert runner.invoke(main, ["toygen", "--out", str(data), "--n", "1", "--seed", "4"]).exit_code == 0
    image = next((data / "images").glob("*.png"))
    out = tmp_path / "latent.json"
    res = runner.invoke(main, ["invert", "--image", str(image), "--model", str(random_bundle_path),
                               "--gaze", "0.0,0.0", "--out", str(out), "--steps", "3"])
    assert res.exit_code == 0, res.output
    assert out.exists() and out.with_suffix(".report.json").exists()
    payload = json.loads(out.read_text())
    assert set(payload) == {"w_dim", "components", "base", "locals"}
