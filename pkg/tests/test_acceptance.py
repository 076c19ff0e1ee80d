"""Acceptance suite: one test per exit criterion, each printing a PASS/FAIL
line and appending to artifacts/acceptance_report.txt.

Criteria 4-8 consume desk-scale trained models from the cached session
fixtures in conftest (first run trains them; expect an hour-plus on a small
CPU box). Paper-scale numbers are not reproducible at desk scale; these
tests check properties and orderings at stated tolerances.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from gcgan.config import TrainConfig, toy_model_config
from gcgan.core import EYE_COMPONENTS, GazeDirection, seed_everything
from gcgan.discriminator import minibatch_stddev
from gcgan.errors import ContractError
from gcgan.evaluation import (
    angular_error,
    fid,
    gaze_angular_error,
    gaze_consistency_report,
    inception_score,
    pitchyaw_to_vector,
    redirection_pixel_mae,
    regressor_angular_error,
    train_gaze_regressor,
)
from gcgan.generator import CompositionalGenerator, LatentCode
from gcgan.inversion import InversionConfig, invert_batch
from gcgan.layers import EqualizedConv2d, EqualizedLinear, ModulatedConv1x1, fourier_grid
from gcgan.manifest import load_tensor_dataset
from gcgan.toyface import decode_gaze_from_mask, synth_corpus
from gcgan.training import (
    PathLengthRegularizer,
    Stage1Trainer,
    frozen_param_names,
    FreezePolicy,
    r1_penalty,
    sample_gaze,
)

from conftest import ARTIFACTS

REPORT = ARTIFACTS / "acceptance_report.txt"


def _record(line: str) -> None:
    print(line)
    REPORT.parent.mkdir(parents=True, exist_ok=True)
    with open(REPORT, "a") as fh:
        fh.write(line + "\n")


def _outcome(criterion: str, ok: bool, detail: str) -> None:
    _record(f"{'PASS' if ok else 'FAIL'} {criterion}: {detail}")
    assert ok, f"{criterion}: {detail}"


# ---------------------------------------------------------------------------
# 1. Architecture invariants


def test_criterion_1_architecture_invariants():
    seed_everything(0)
    gen = CompositionalGenerator(toy_model_config())
    code = gen.sample_latent(4, torch.Generator().manual_seed(0))
    g1 = torch.tensor([[0.0, 0.0]] * 4)
    g2 = torch.tensor([[0.35, -0.25]] * 4)
    pair1, aux1 = gen.generate(code, g1, return_aux=True)
    _, aux2 = gen.generate(code, g2, return_aux=True)

    theta_free = all(
        torch.equal(aux1["components"][n].pseudo_depth, aux2["components"][n].pseudo_depth)
        and torch.equal(aux1["components"][n].features, aux2["components"][n].features)
        for n in ("background", "face", "eyebrows", "nose")
    )
    coarse_unity = torch.allclose(aux1["coarse_masks"].sum(1), torch.ones(4, 8, 8), atol=1e-6)
    final_unity = torch.allclose(pair1.mask.sum(1), torch.ones(4, 64, 64), atol=1e-5)
    const_batch = torch.randn(1, 16, 4, 4).expand(8, -1, -1, -1).contiguous()
    mbstd_zero = minibatch_stddev(const_batch)[:, -1].abs().max().item() < 1e-3

    ok = theta_free and coarse_unity and final_unity and mbstd_zero
    _outcome(
        "criterion 1 (architecture invariants)",
        ok,
        f"theta-independence={theta_free} coarse-unity={coarse_unity} "
        f"final-unity={final_unity} mbstd-zero={mbstd_zero}",
    )


# ---------------------------------------------------------------------------
# 2. Gradient correctness


def _rel_err(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    denom = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return ((analytic - numeric).norm() / denom).item()


def _finite_difference(f, params: list[torch.Tensor], eps: float = 1e-5) -> list[torch.Tensor]:
    grads = []
    for p in params:
        g = torch.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.numel()):
            with torch.no_grad():
                orig = flat[i].item()
                flat[i] = orig + eps
            hi = f()
            with torch.no_grad():
                flat[i] = orig - eps
            lo = f()
            with torch.no_grad():
                flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


class _MiniModulated(torch.nn.Module):
    """4x4 modulated-conv pipeline with a scalar head, double precision."""

    def __init__(self):
        super().__init__()
        self.conv1 = ModulatedConv1x1(4, 6, style_dim=5)
        self.conv2 = ModulatedConv1x1(6, 3, style_dim=5)
        self.head = EqualizedLinear(3 * 16, 1)
        self.act = torch.nn.LeakyReLU(0.2)

    def forward(self, x, style):
        h = self.act(self.conv1(x, style))
        h = self.act(self.conv2(h, style))
        return self.head(h.reshape(h.shape[0], -1)).sum()


def test_criterion_2_gradient_checks():
    torch.manual_seed(1)
    results = {}

    # Modulated-conv pipeline.
    net = _MiniModulated().double()
    x = torch.randn(2, 4, 4, 4, dtype=torch.float64)
    style = torch.randn(2, 5, dtype=torch.float64)
    params = [p for p in net.parameters()]
    loss = net(x, style)
    analytic = torch.autograd.grad(loss, params)
    numeric = _finite_difference(lambda: net(x, style).item(), params)
    results["modulated_conv"] = max(_rel_err(a, n) for a, n in zip(analytic, numeric))

    # R1 penalty gradient w.r.t. discriminator parameters (double backward).
    torch.manual_seed(2)
    mini_d = torch.nn.Sequential(
        EqualizedConv2d(3, 4, 3, padding=1), torch.nn.LeakyReLU(0.2), torch.nn.Flatten(),
        EqualizedLinear(4 * 16, 1),
    ).double()
    real = torch.randn(2, 3, 4, 4, dtype=torch.float64)

    def r1_value() -> float:
        x_in = real.detach().clone().requires_grad_(True)
        score = mini_d(x_in).squeeze(1)
        return r1_penalty(score, (x_in,)).item()

    x_in = real.detach().clone().requires_grad_(True)
    score = mini_d(x_in).squeeze(1)
    r1 = r1_penalty(score, (x_in,))
    d_params = list(mini_d.parameters())
    # Bias terms cancel in grad-of-gradient; treat them as zero gradients.
    analytic = torch.autograd.grad(r1, d_params, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g for p, g in zip(d_params, analytic)]
    numeric = _finite_difference(r1_value, d_params)
    results["r1"] = max(_rel_err(a, n) for a, n in zip(analytic, numeric))

    # Path-length penalty gradient w.r.t. a tiny generator's parameters.
    torch.manual_seed(3)
    lin = EqualizedLinear(6, 3 * 16).double()
    pl = PathLengthRegularizer(decay=0.0).double()
    pl.ema.fill_(0.7)
    w0 = torch.randn(2, 2, 3, dtype=torch.float64)

    def pl_value() -> float:
        torch.manual_seed(99)  # the probe noise must match across evaluations
        w = w0.detach().clone().requires_grad_(True)
        img = lin(w.reshape(2, -1)).reshape(2, 3, 4, 4)
        return pl(img, w).item()

    torch.manual_seed(99)
    w = w0.detach().clone().requires_grad_(True)
    img = lin(w.reshape(2, -1)).reshape(2, 3, 4, 4)
    penalty = pl(img, w)
    g_params = list(lin.parameters())
    # The bias drops out of the Jacobian-vector product.
    analytic = torch.autograd.grad(penalty, g_params, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g for p, g in zip(g_params, analytic)]
    numeric = _finite_difference(pl_value, g_params)
    results["path_length"] = max(_rel_err(a, n) for a, n in zip(analytic, numeric))

    worst = max(results.values())
    _outcome(
        "criterion 2 (gradient correctness)",
        worst <= 1e-3,
        "max rel err " + ", ".join(f"{k}={v:.2e}" for k, v in results.items()),
    )


# ---------------------------------------------------------------------------
# 3. Metric oracles


def test_criterion_3_metric_oracles():
    checks = {}
    checks["angular_identical"] = angular_error([0, 0, -1], [0, 0, -1]) == pytest.approx(0.0, abs=1e-9)
    checks["angular_orthogonal"] = angular_error([1, 0, 0], [0, 0, 1]) == pytest.approx(90.0)
    checks["angular_scale"] = angular_error([0.1, 0.2, -0.5], [0.2, 0.4, -1.0]) == pytest.approx(0.0, abs=1e-5)
    checks["forward_vector"] = np.allclose(pitchyaw_to_vector(GazeDirection(0, 0)), [0, 0, -1])

    rng = np.random.default_rng(0)
    a = rng.normal(size=(4000, 2)) @ np.array([[1.0, 0.2], [0.0, 0.6]])
    b = rng.normal(size=(4000, 2)) + [0.3, -0.5]
    mu1, mu2 = a.mean(0), b.mean(0)
    s1 = np.cov(a, rowvar=False)
    s2 = np.cov(b, rowvar=False)
    vals, vecs = np.linalg.eigh(s1)
    s1h = vecs @ np.diag(np.sqrt(vals)) @ vecs.T
    mvals = np.linalg.eigvalsh(s1h @ s2 @ s1h)
    diff = mu1 - mu2
    closed = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2 * np.sqrt(np.maximum(mvals, 0)).sum())
    checks["fid_closed_form"] = abs(fid(a, b) - closed) <= 1e-6
    checks["fid_identity"] = abs(fid(a, a)) <= 1e-6

    c = 5
    checks["is_lower_bound"] = inception_score(np.tile([0.2] * 5, (30, 1))) == pytest.approx(1.0)
    checks["is_upper_bound"] = inception_score(np.eye(c)[np.arange(50) % c]) == pytest.approx(float(c))

    ok = all(checks.values())
    _outcome("criterion 3 (metric oracles)", ok,
             "failures: " + (", ".join(k for k, v in checks.items() if not v) or "none"))


# ---------------------------------------------------------------------------
# 4. Toy end-to-end stage 1


def _decode_probe(gen, gaze_stats, n, seed):
    torch_rng = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    z = torch.randn(n, gen.cfg.z_dim, generator=torch_rng)
    gazes = sample_gaze(gaze_stats, n, rng)
    with torch.no_grad():
        pair = gen.generate(z, torch.from_numpy(gazes).float())
    masks = pair.hard_masks(gen.cfg.components)
    targets, decoded, errors = [], [], []
    for i, mask in enumerate(masks):
        target = GazeDirection(*gazes[i])
        try:
            dec = decode_gaze_from_mask(mask)
        except ContractError:
            errors.append(90.0)
            continue
        targets.append([target.yaw, target.pitch])
        decoded.append([dec.yaw, dec.pitch])
        errors.append(gaze_angular_error(target, dec))
    return np.array(targets), np.array(decoded), np.array(errors)


def test_criterion_4_stage1_gaze_control(stage1_bundle):
    gen = stage1_bundle.build_generator()
    targets, decoded, errors = _decode_probe(gen, stage1_bundle.gaze_stats(), n=200, seed=77)
    mean_err = float(errors.mean())
    corr = float(np.corrcoef(targets[:, 0], decoded[:, 0])[0, 1])
    try:
        from gcgan.reporting import plot_gaze_scatter

        plot_gaze_scatter(targets, decoded, ARTIFACTS / "acceptance_stage1_gaze.png")
    except Exception:
        pass
    ok = mean_err <= 5.0 and corr >= 0.9
    _outcome("criterion 4 (stage-1 toy gaze control)", ok,
             f"mean decoded angular error {mean_err:.2f} deg (<=5), yaw pearson {corr:.3f} (>=0.9)")


# ---------------------------------------------------------------------------
# 5. Toy stage 2 transfer


def test_criterion_5_stage2_transfer(stage1_bundle, stage2_id4_bundle, stage2_id3_bundle):
    frozen = stage2_id4_bundle.freeze_manifest
    assert frozen, "stage-2 bundle must carry its freeze manifest"
    unchanged = all(
        torch.equal(stage2_id4_bundle.generator_state[name], stage1_bundle.generator_state[name])
        for name in frozen
    )

    gen1 = stage1_bundle.build_generator()
    gen4 = stage2_id4_bundle.build_generator()
    gen3 = stage2_id3_bundle.build_generator()
    stats = stage1_bundle.gaze_stats()
    rep4 = gaze_consistency_report(gen1, gen4, stats, n_probes=100, seed=5)
    rep3 = gaze_consistency_report(gen1, gen3, stats, n_probes=100, seed=5)
    mse4 = float(np.mean(rep4.mask_mse))
    mse3 = float(np.mean(rep3.mask_mse))
    delta4 = float(np.mean(rep4.decoded_delta_deg)) if rep4.decoded_delta_deg else float("inf")

    ok = unchanged and (mse4 < mse3) and delta4 <= 7.0
    _outcome(
        "criterion 5 (stage-2 transfer, freeze row 4 vs 3)",
        ok,
        f"frozen-params-unchanged={unchanged}, mask MSE id4={mse4:.5f} < id3={mse3:.5f}: {mse4 < mse3}, "
        f"cross-domain decoded-gaze delta {delta4:.2f} deg (<=7)",
    )


# ---------------------------------------------------------------------------
# 6. Disentanglement ablation


def test_criterion_6_disentanglement(stage1_early_bundle, fullcond_bundle):
    # Matched training budgets: the stage-1 snapshot taken at the fully
    # conditioned model's step count.
    grouped = redirection_pixel_mae(stage1_early_bundle.build_generator(),
                                    stage1_early_bundle.gaze_stats(),
                                    n_probes=5, n_gazes=32, seed=3)
    fullc = redirection_pixel_mae(fullcond_bundle.build_generator(), fullcond_bundle.gaze_stats(),
                                  n_probes=5, n_gazes=32, seed=3)
    ok = grouped < fullc
    _outcome("criterion 6 (grouped vs fully conditioned redirection MAE)", ok,
             f"grouped={grouped:.3f} < fully-conditioned={fullc:.3f} (matched step budgets)")


# ---------------------------------------------------------------------------
# 7. Self-inversion


def test_criterion_7_self_inversion(stage1_bundle):
    gen = stage1_bundle.build_generator()
    n = 50
    torch_rng = torch.Generator().manual_seed(123)
    rng = np.random.default_rng(123)
    z = torch.randn(n, gen.cfg.z_dim, generator=torch_rng)
    gazes = torch.from_numpy(sample_gaze(stage1_bundle.gaze_stats(), n, rng)).float()
    with torch.no_grad():
        code_true = gen.map_latent(z)
        target_pair = gen.generate(code_true, gazes)

    cfg = InversionConfig(steps=400, lr=0.05, seed=0, mean_latent_samples=2048)
    result = invert_batch(target_pair.image.detach(), gazes, gen, cfg)

    with torch.no_grad():
        recon_pair = gen.generate(result.latent, gazes)
    target_masks = target_pair.mask.argmax(1)
    recon_masks = recon_pair.mask.argmax(1)

    recon_losses = np.array(result.report.per_sample["recon_loss"])
    successes = 0
    ious = []
    for i in range(n):
        inter_union = []
        for c in range(gen.cfg.num_components):
            t = target_masks[i] == c
            r = recon_masks[i] == c
            union = (t | r).sum().item()
            if union == 0:
                continue
            inter_union.append((t & r).sum().item() / union)
        iou = float(np.mean(inter_union))
        ious.append(iou)
        if recon_losses[i] <= 1e-3 and iou >= 0.95:
            successes += 1
    rate = successes / n
    ok = rate >= 0.9
    _outcome("criterion 7 (self-inversion)", ok,
             f"{successes}/{n} probes with recon loss <= 1e-3 and mask IoU >= 0.95 "
             f"(median loss {np.median(recon_losses):.2e}, median IoU {np.median(ious):.3f})")


# ---------------------------------------------------------------------------
# 8. Augmentation utility


def test_criterion_8_augmentation_utility(stage1_bundle, corpus_a, tmp_path_factory):
    from gcgan.augmentation import InvertedLatent, build_augmented_set, default_plan
    from gcgan.manifest import DatasetManifest

    gen = stage1_bundle.build_generator()
    data = load_tensor_dataset(corpus_a, EYE_COMPONENTS)
    train_images, train_gazes = data.images[:1000], data.gazes[:1000]

    test_dir = ARTIFACTS / "dataTest"
    if not (test_dir / "manifest.jsonl").exists():
        synth_corpus(test_dir, n=400, seed=99, domain_style="A")
    test_data = load_tensor_dataset(DatasetManifest.load(test_dir / "manifest.jsonl"), EYE_COMPONENTS)

    aug_dir = ARTIFACTS / "dataAug"
    if not (aug_dir / "manifest.jsonl").exists():
        n_inv = 64
        cfg = InversionConfig(steps=250, lr=0.05, seed=0, mean_latent_samples=2048)
        result = invert_batch(train_images[:n_inv], train_gazes[:n_inv], gen, cfg)
        latents = {
            f"inv{i:03d}": InvertedLatent(
                id=f"inv{i:03d}",
                latent=result.latent.select(i),
                gaze=GazeDirection(*train_gazes[i].tolist()),
            )
            for i in range(n_inv)
        }
        plan = default_plan(sorted(latents), n_ops=1000, seed=0,
                            gaze_stats=stage1_bundle.gaze_stats(),
                            components=gen.cfg.components)
        build_augmented_set(latents, plan, gen, aug_dir,
                            gaze_stats=stage1_bundle.gaze_stats(), domain="toy-aug")
    aug_data = load_tensor_dataset(DatasetManifest.load(aug_dir / "manifest.jsonl"), EYE_COMPONENTS)

    base_errs, aug_errs = [], []
    for seed in (0, 1, 2):
        net = train_gaze_regressor(train_images, train_gazes, epochs=6, seed=seed)
        base_errs.append(regressor_angular_error(net, test_data.images, test_data.gazes))
        imgs = torch.cat([train_images, aug_data.images])
        gzs = torch.cat([train_gazes, aug_data.gazes])
        net2 = train_gaze_regressor(imgs, gzs, epochs=6, seed=seed)
        aug_errs.append(regressor_angular_error(net2, test_data.images, test_data.gazes))
    base_mean, aug_mean = float(np.mean(base_errs)), float(np.mean(aug_errs))
    ok = aug_mean <= base_mean
    _outcome("criterion 8 (augmentation utility)", ok,
             f"test angular error: real-only {base_mean:.2f} deg vs augmented {aug_mean:.2f} deg "
             f"(3-seed means; non-increasing required)")


# ---------------------------------------------------------------------------
# 9. Pipeline determinism


def test_criterion_9_determinism(tmp_path):
    from gcgan.manifest import DatasetManifest
    from gcgan.preprocess import PreprocessConfig, build_dataset
    from gcgan.toyface import write_raw_corpus
    from gcgan.training import train_stage1

    raw = tmp_path / "raw"
    write_raw_corpus(raw, n=40, seed=7, domain_style="A")

    outputs = []
    for run in ("run1", "run2"):
        out = tmp_path / run
        manifest = build_dataset(raw, out / "data", PreprocessConfig(size=64, domain="toy-A"))
        data = load_tensor_dataset(manifest, EYE_COMPONENTS)
        cfg = TrainConfig(steps=30, seed=13, log_every=100, checkpoint_every=0)
        bundle = train_stage1(toy_model_config(), data, cfg, run_dir=None)
        gen = bundle.build_generator()
        with torch.no_grad():
            z = torch.randn(4, 512, generator=torch.Generator().manual_seed(5))
            pair = gen.generate(z, torch.zeros(4, 2))
        from PIL import Image
        import io

        blobs = []
        for img in pair.image_uint8():
            buf = io.BytesIO()
            Image.fromarray(img).save(buf, format="PNG")
            blobs.append(buf.getvalue())
        outputs.append(
            {
                "manifest": (out / "data" / "manifest.jsonl").read_bytes(),
                "weights_fingerprint": {
                    k: v.numpy().tobytes() for k, v in bundle.generator_state.items()
                },
                "images": blobs,
            }
        )

    manifests_equal = outputs[0]["manifest"] == outputs[1]["manifest"]
    weights_equal = outputs[0]["weights_fingerprint"] == outputs[1]["weights_fingerprint"]
    images_equal = outputs[0]["images"] == outputs[1]["images"]
    ok = manifests_equal and weights_equal and images_equal
    _outcome("criterion 9 (pipeline determinism)", ok,
             f"manifests={manifests_equal} weights={weights_equal} images={images_equal}")
