"""Command-line interface: preprocessing, toy data, training, inversion,
augmentation, evaluation reports (JSON + CSV + figures), and the service."""
from __future__ import annotations

import json
import logging
import math
from pathlib import Path

import click
import numpy as np
import torch

from .config import ModelConfig, TrainConfig, load_flat_config, toy_model_config
from .core import EYE_COMPONENTS, GazeDirection, seed_everything
from .manifest import DatasetManifest, load_image_tensor, load_mask, load_tensor_dataset
from .preprocess import PreprocessConfig, build_dataset

log = logging.getLogger(__name__)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Enable debug logging.")
def main(verbose: bool) -> None:
    """Gaze-aware compositional GAN pipeline."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


@main.command()
@click.option("--raw", "raw_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--size", default=256, show_default=True)
@click.option("--mode", type=click.Choice(["eyes", "face"]), default="eyes", show_default=True)
@click.option("--domain", default="labeled", show_default=True)
@click.option("--drop-gaze", is_flag=True, help="Null out gaze fields (unlabeled domain).")
def preprocess(raw_dir: str, out_dir: str, size: int, mode: str, domain: str, drop_gaze: bool) -> None:
    """Normalize raw images + landmarks into a training-ready dataset."""
    cfg = PreprocessConfig(size=size, mode=mode, domain=domain, drop_gaze=drop_gaze)
    manifest = build_dataset(raw_dir, out_dir, cfg)
    click.echo(f"wrote {len(manifest)} samples to {out_dir} (skipped {manifest.skipped})")


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--n", default=2000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--style", type=click.Choice(["A", "B"]), default="A", show_default=True)
@click.option("--size", default=64, show_default=True, help="Processed crop resolution.")
@click.option("--raw-size", default=160, show_default=True)
@click.option("--raw", "emit_raw", is_flag=True,
              help="Emit raw faces + landmark JSONs instead of a processed dataset.")
def toygen(out_dir: str, n: int, seed: int, style: str, size: int, raw_size: int, emit_raw: bool) -> None:
    """Generate the deterministic parametric toy-face corpus."""
    from .toyface import synth_corpus, write_raw_corpus

    if emit_raw:
        count = write_raw_corpus(out_dir, n, seed, style, raw_size)
        click.echo(f"wrote {count} raw samples to {out_dir}")
    else:
        manifest = synth_corpus(out_dir, n, seed, style, crop_size=size, raw_size=raw_size)
        click.echo(f"wrote {len(manifest)} processed samples to {out_dir}")


def _load_train_setup(cfg_path: str | None, profile: str, overrides: dict) -> tuple[TrainConfig, ModelConfig]:
    extra: dict = {}
    if cfg_path:
        train_cfg, extra = load_flat_config(cfg_path)
    else:
        train_cfg = TrainConfig()
    for key, val in overrides.items():
        if val is not None:
            setattr(train_cfg, key, val)
    model_overrides = {k: v for k, v in extra.items() if k in ModelConfig.__dataclass_fields__}
    model_cfg = toy_model_config(**model_overrides) if profile == "toy" else ModelConfig(**model_overrides)
    return train_cfg, model_cfg


@main.command("train-stage1")
@click.option("--data", required=True, type=click.Path(exists=True), help="Dataset dir or manifest.jsonl.")
@click.option("--cfg", "cfg_path", type=click.Path(exists=True), help="Flat key=value config file.")
@click.option("--run-dir", required=True, type=click.Path(file_okay=False))
@click.option("--profile", type=click.Choice(["toy", "full"]), default="toy", show_default=True)
@click.option("--steps", type=int, default=None)
@click.option("--seed", type=int, default=None)
def train_stage1_cmd(data: str, cfg_path: str | None, run_dir: str, profile: str,
                     steps: int | None, seed: int | None) -> None:
    """Adversarial training on the labeled domain."""
    from .training import train_stage1

    train_cfg, model_cfg = _load_train_setup(cfg_path, profile, {"steps": steps, "seed": seed})
    manifest = _load_manifest(data)
    dataset = load_tensor_dataset(manifest, model_cfg.components)
    bundle = train_stage1(model_cfg, dataset, train_cfg, Path(run_dir))
    click.echo(f"stage-1 bundle at {Path(run_dir) / 'stage1.gcgn'} (step {bundle.step})")


@main.command("train-stage2")
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--init", "init_path", required=True, type=click.Path(exists=True),
              help="Stage-1 checkpoint to adapt.")
@click.option("--freeze", default="", help="Comma-separated module ids, e.g. glg,render0,render1.")
@click.option("--ablation-row", type=int, default=None, help="Use a studied freeze/constraint row (1-5).")
@click.option("--no-mask-constraint", is_flag=True)
@click.option("--cfg", "cfg_path", type=click.Path(exists=True))
@click.option("--run-dir", required=True, type=click.Path(file_okay=False))
@click.option("--steps", type=int, default=None)
@click.option("--seed", type=int, default=None)
def train_stage2_cmd(data: str, init_path: str, freeze: str, ablation_row: int | None,
                     no_mask_constraint: bool, cfg_path: str | None, run_dir: str,
                     steps: int | None, seed: int | None) -> None:
    """Adapt a stage-1 model to an unlabeled domain with frozen gaze modules."""
    from .checkpoint import load_bundle
    from .training import FreezePolicy, ablation_policy, parse_freeze_spec, train_stage2

    stage1 = load_bundle(init_path)
    train_cfg, _ = _load_train_setup(cfg_path, "toy", {"steps": steps, "seed": seed})
    policy = None
    mask_constraint = not no_mask_constraint
    if ablation_row is not None:
        policy, mask_constraint = ablation_policy(stage1.config, ablation_row)
    elif freeze:
        policy = FreezePolicy.of(*parse_freeze_spec(freeze, stage1.config))
    manifest = _load_manifest(data)
    dataset = load_tensor_dataset(manifest, stage1.config.components)
    bundle = train_stage2(stage1, dataset, train_cfg, Path(run_dir), policy, mask_constraint)
    click.echo(f"stage-2 bundle at {Path(run_dir) / 'stage2.gcgn'} (step {bundle.step})")


@main.command()
@click.option("--image", required=True, type=click.Path(exists=True))
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--gaze", default=None, help="yaw,pitch in radians; omitted = optimize gaze too.")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--steps", default=400, show_default=True)
@click.option("--lr", default=0.05, show_default=True)
def invert(image: str, model_path: str, gaze: str | None, out_path: str, steps: int, lr: float) -> None:
    """Embed an image into the latent space; writes latent JSON + report."""
    from .checkpoint import load_bundle
    from .inversion import InversionConfig, invert as run_invert

    bundle = load_bundle(model_path)
    gen = bundle.build_generator()
    target = load_image_tensor(Path(image))
    gaze_dir = None
    if gaze:
        yaw, pitch = (float(x) for x in gaze.split(","))
        gaze_dir = GazeDirection(yaw, pitch)
    cfg = InversionConfig(steps=steps, lr=lr, gaze_mode="fixed" if gaze_dir else "optimized")
    result = run_invert(target, gaze_dir, gen, cfg)
    out = Path(out_path)
    result.latent.save(out)
    out.with_suffix(".report.json").write_text(json.dumps(result.report.to_dict(), indent=2, sort_keys=True))
    out.with_suffix(".gaze.json").write_text(json.dumps([result.gaze.yaw, result.gaze.pitch]))
    click.echo(f"inverted: loss={result.report.loss:.3g} recon={result.report.recon_loss:.3g} -> {out}")


@main.command()
@click.option("--latents", "latents_dir", required=True, type=click.Path(exists=True),
              help="Directory of latent JSON files named <id>.json with sidecar gaze.")
@click.option("--plan", "plan_path", required=True, type=click.Path(exists=True))
@click.option("--models", "model_paths", required=True,
              help="stage1.gcgn[,stage2.gcgn] checkpoint paths.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def augment(latents_dir: str, plan_path: str, model_paths: str, out_dir: str) -> None:
    """Execute an augmentation plan into an annotated synthetic dataset."""
    from .augmentation import AugmentationPlan, InvertedLatent, build_augmented_set
    from .checkpoint import load_bundle
    from .generator import LatentCode

    paths = [p for p in model_paths.split(",") if p]
    bundle_a = load_bundle(paths[0])
    model_a = bundle_a.build_generator()
    model_b = load_bundle(paths[1]).build_generator() if len(paths) > 1 else None

    latents: dict[str, InvertedLatent] = {}
    for path in sorted(Path(latents_dir).glob("*.json")):
        if path.name.endswith((".gaze.json", ".report.json")):
            continue
        code = LatentCode.load(path)
        gaze_file = path.with_suffix(".gaze.json")
        gaze = GazeDirection(*json.loads(gaze_file.read_text())) if gaze_file.exists() else GazeDirection(0, 0)
        latents[path.stem] = InvertedLatent(id=path.stem, latent=code, gaze=gaze)

    plan = AugmentationPlan.from_json(Path(plan_path).read_text())
    manifest = build_augmented_set(latents, plan, model_a, out_dir, model_b,
                                   gaze_stats=bundle_a.gaze_stats())
    click.echo(f"wrote {len(manifest)} augmented samples to {out_dir}")


@main.command()
@click.option("--metric", type=click.Choice(["fid", "is", "gaze", "mae", "consistency"]), required=True)
@click.option("--real", "real_path", type=click.Path(exists=True), default=None)
@click.option("--fake", "fake_path", type=click.Path(exists=True), default=None)
@click.option("--models", "model_paths", default=None, help="Checkpoints for mae/consistency.")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True)
def evaluate(metric: str, real_path: str | None, fake_path: str | None,
             model_paths: str | None, out_path: str, seed: int) -> None:
    """Compute a metric; writes report.json, report.csv and figures."""
    from . import evalcli

    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    if metric in ("fid", "is"):
        evalcli.run_distribution_metric(metric, real_path, fake_path, out, seed)
    elif metric == "gaze":
        evalcli.run_gaze_metric(fake_path, out)
    elif metric == "mae":
        evalcli.run_mae_metric(model_paths, out, seed)
    else:
        evalcli.run_consistency_metric(model_paths, out, seed)
    click.echo(f"report written to {out}")


@main.command()
@click.option("--models", "model_spec", required=True,
              help="Comma-separated name=path pairs, e.g. stage1=runs/stage1.gcgn.")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
@click.option("--token", default=None, help="Optional static API token.")
@click.option("--workers", default=2, show_default=True)
def serve(model_spec: str, host: str, port: int, token: str | None, workers: int) -> None:
    """Run the HTTP inference service."""
    from .service import serve as run_serve

    paths = {}
    for item in model_spec.split(","):
        name, _, path = item.partition("=")
        if not path:
            raise click.BadParameter("expected name=path pairs")
        paths[name] = path
    run_serve(paths, host=host, port=port, token=token, workers=workers)


def _load_manifest(path: str) -> DatasetManifest:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.jsonl"
    return DatasetManifest.load(p)


if __name__ == "__main__":
    main()
