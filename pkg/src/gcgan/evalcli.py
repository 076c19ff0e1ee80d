"""Metric report builders behind the ``evaluate`` CLI command.

Each builder writes a JSON report, a CSV with per-sample rows where that
makes sense, and PNG figures next to the report path.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch

from .core import GazeDirection
from .errors import ContractError
from .manifest import DatasetManifest, load_image_tensor, load_mask
from .reporting import plot_gaze_scatter, plot_histogram, write_csv, write_json


def _load_images(manifest: DatasetManifest, limit: int | None = None) -> torch.Tensor:
    records = manifest.records[:limit] if limit else manifest.records
    return torch.stack([load_image_tensor(manifest.resolve(r.image_path)) for r in records])


def _hue_bins(images: torch.Tensor, bins: int = 8) -> torch.Tensor:
    """Coarse color-statistic labels for training the desk-scale feature net."""
    rgb = (images + 1.0) / 2.0
    r, g, b = rgb[:, 0].mean(dim=(1, 2)), rgb[:, 1].mean(dim=(1, 2)), rgb[:, 2].mean(dim=(1, 2))
    hue = torch.atan2(math.sqrt(3.0) * (g - b), 2.0 * r - g - b)
    edges = torch.linspace(-math.pi, math.pi, bins + 1)
    return torch.clamp(torch.bucketize(hue, edges) - 1, 0, bins - 1)


def run_distribution_metric(metric: str, real_path: str | None, fake_path: str | None,
                            out: Path, seed: int) -> None:
    from .evaluation import fid, inception_score, train_toy_feature_net

    if real_path is None or fake_path is None:
        raise ContractError("fid/is require --real and --fake dataset manifests")
    real = DatasetManifest.load(_manifest_path(real_path))
    fake = DatasetManifest.load(_manifest_path(fake_path))
    real_images = _load_images(real)
    fake_images = _load_images(fake)

    bins = 8
    net = train_toy_feature_net(real_images, _hue_bins(real_images, bins), num_classes=bins, seed=seed)
    payload: dict = {"metric": metric, "n_real": len(real), "n_fake": len(fake)}
    if metric == "fid":
        payload["value"] = fid(net.extract(real_images), net.extract(fake_images))
    else:
        payload["value"] = inception_score(net.class_probs(fake_images))
    write_json(out, payload)
    write_csv(out.with_suffix(".csv"), [payload])


def run_gaze_metric(fake_path: str | None, out: Path) -> None:
    """Decoded-gaze accuracy of a generated dataset against its labels."""
    from .evaluation import gaze_angular_error
    from .toyface import decode_gaze_from_mask

    if fake_path is None:
        raise ContractError("gaze metric requires --fake with labeled masks")
    manifest = DatasetManifest.load(_manifest_path(fake_path))
    rows = []
    targets, decoded = [], []
    from .core import EYE_COMPONENTS

    for rec in manifest:
        if rec.gaze is None:
            continue
        mask = load_mask(manifest.resolve(rec.mask_path), EYE_COMPONENTS)
        try:
            dec = decode_gaze_from_mask(mask)
        except ContractError:
            continue
        target = GazeDirection(*rec.gaze)
        err = gaze_angular_error(target, dec)
        rows.append({"id": rec.id, "target_yaw": target.yaw, "target_pitch": target.pitch,
                     "decoded_yaw": dec.yaw, "decoded_pitch": dec.pitch, "angular_error_deg": err})
        targets.append([target.yaw, target.pitch])
        decoded.append([dec.yaw, dec.pitch])
    if not rows:
        raise ContractError("no decodable labeled samples found")
    errs = np.array([r["angular_error_deg"] for r in rows])
    t, d = np.array(targets), np.array(decoded)
    payload = {
        "metric": "gaze",
        "n": len(rows),
        "mean_error_deg": float(errs.mean()),
        "p90_error_deg": float(np.percentile(errs, 90)),
        "yaw_pearson": float(np.corrcoef(t[:, 0], d[:, 0])[0, 1]),
        "pitch_pearson": float(np.corrcoef(t[:, 1], d[:, 1])[0, 1]),
    }
    write_json(out, payload)
    write_csv(out.with_suffix(".csv"), rows)
    plot_gaze_scatter(t, d, out.with_suffix(".scatter.png"))
    plot_histogram(errs, out.with_suffix(".hist.png"), "angular error (deg)", "decoded gaze error")


def run_mae_metric(model_paths: str | None, out: Path, seed: int) -> None:
    from .checkpoint import load_bundle
    from .evaluation import redirection_pixel_mae

    if not model_paths:
        raise ContractError("mae requires --models <checkpoint>")
    path = model_paths.split(",")[0]
    bundle = load_bundle(path)
    gen = bundle.build_generator()
    value = redirection_pixel_mae(gen, bundle.gaze_stats(), seed=seed)
    payload = {"metric": "redirection_pixel_mae", "value": value, "model": str(path),
               "n_probes": 5, "n_gazes": 32}
    write_json(out, payload)
    write_csv(out.with_suffix(".csv"), [payload])


def run_consistency_metric(model_paths: str | None, out: Path, seed: int) -> None:
    from .checkpoint import load_bundle
    from .evaluation import gaze_consistency_report

    if not model_paths or "," not in model_paths:
        raise ContractError("consistency requires --models stage1.gcgn,stage2.gcgn")
    path_a, path_b = model_paths.split(",")[:2]
    bundle_a = load_bundle(path_a)
    bundle_b = load_bundle(path_b)
    report = gaze_consistency_report(bundle_a.build_generator(), bundle_b.build_generator(),
                                     bundle_a.gaze_stats(), seed=seed)
    payload = {"metric": "consistency", "models": [str(path_a), str(path_b)], **report.to_json_dict()}
    write_json(out, payload)
    write_csv(out.with_suffix(".csv"),
              [{"probe": i, "mask_mse": v} for i, v in enumerate(report.mask_mse)])
    plot_histogram(np.array(report.mask_mse), out.with_suffix(".hist.png"),
                   "cross-domain mask MSE", "gaze consistency")


def _manifest_path(path: str) -> Path:
    p = Path(path)
    return p / "manifest.jsonl" if p.is_dir() else p
