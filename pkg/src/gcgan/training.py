"""Two-stage adversarial training: conditioned training on labeled data,
then mask-constrained adaptation to an unlabeled domain with frozen
gaze-bearing modules."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import ModelBundle, load_bundle, save_bundle
from .config import LossWeights, ModelConfig, TrainConfig
from .discriminator import GazeDiscriminator
from .errors import ContractError, NonFiniteLossError
from .generator import CompositionalGenerator, LatentCode, random_mix_plan, style_mix
from .manifest import TensorDataset

log = logging.getLogger(__name__)

FROZEN_TAG = "frozen_stage1"
TRAINABLE_TAG = "trainable"


# ---------------------------------------------------------------------------
# Loss pieces


def nonsat_d_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """Non-saturating logistic discriminator loss."""
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


def nonsat_g_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    return F.softplus(-fake_logits).mean()


def r1_penalty(score: torch.Tensor, inputs: Iterable[torch.Tensor]) -> torch.Tensor:
    """0.5 * E ||grad of the score w.r.t. the real inputs||^2."""
    grads = torch.autograd.grad(
        outputs=score.sum(), inputs=list(inputs), create_graph=True
    )
    total = sum(g.reshape(g.shape[0], -1).pow(2).sum(dim=1) for g in grads)
    return 0.5 * total.mean()


class PathLengthRegularizer(nn.Module):
    """Keeps the generator Jacobian norm near a running exponential average."""

    def __init__(self, decay: float = 0.01):
        super().__init__()
        self.decay = decay
        self.register_buffer("ema", torch.zeros(()))
        self.register_buffer("steps", torch.zeros((), dtype=torch.long))

    def forward(self, images: torch.Tensor, w_tensor: torch.Tensor) -> torch.Tensor:
        noise = torch.randn_like(images) / math.sqrt(images.shape[2] * images.shape[3])
        output = (images * noise).sum()
        (grad,) = torch.autograd.grad(outputs=output, inputs=w_tensor, create_graph=True)
        lengths = grad.pow(2).sum(dim=2).mean(dim=1).sqrt()
        with torch.no_grad():
            target = self.ema + self.decay * (lengths.mean() - self.ema)
            self.ema.copy_(target)
            self.steps += 1
        return (lengths - target).pow(2).mean()


def mask_consistency_loss(coarse_masks: torch.Tensor, final_masks: torch.Tensor) -> torch.Tensor:
    """MSE between coarse masks and the final masks pooled to coarse resolution.

    Zero exactly when the coarse masks equal the downsampled final masks.
    """
    pooled = F.adaptive_avg_pool2d(final_masks, coarse_masks.shape[-2:])
    return F.mse_loss(coarse_masks, pooled)


def mask_coverage_loss(
    masks: torch.Tensor, min_area: float = 0.002, max_area: float = 0.98
) -> torch.Tensor:
    """Penalize components whose mask is near empty or swallows the frame."""
    area = masks.mean(dim=(2, 3))  # (B, K) fraction of pixels
    under = (F.relu(min_area - area) / min_area).pow(2)
    over = (F.relu(area - max_area) / (1.0 - max_area)).pow(2)
    return (under + over).sum(dim=1).mean()


def sample_gaze(
    labeled_stats: np.ndarray, n: int, rng: np.random.Generator, mode: str = "empirical"
) -> np.ndarray:
    """Draw conditioning gazes from the labeled-domain distribution.

    Empirical mode resamples observed (yaw, pitch) rows with replacement;
    uniform mode draws independently from the per-axis observed range.
    """
    stats = np.asarray(labeled_stats, dtype=np.float64)
    if stats.size == 0:
        raise ContractError("cannot sample gazes from empty labeled statistics")
    if mode == "empirical":
        idx = rng.integers(0, len(stats), size=n)
        return stats[idx].copy()
    if mode == "uniform":
        lo, hi = stats.min(axis=0), stats.max(axis=0)
        return rng.uniform(lo, hi, size=(n, 2))
    raise ContractError(f"unknown gaze sampling mode {mode!r}")


# ---------------------------------------------------------------------------
# Freeze policies


@dataclass(frozen=True)
class FreezePolicy:
    """Set of module ids whose parameters stage 2 must not touch."""

    modules: frozenset[str]

    def __post_init__(self) -> None:
        if not self.modules:
            raise ContractError("stage-2 freeze policy must not be empty")

    @staticmethod
    def of(*ids: str) -> "FreezePolicy":
        return FreezePolicy(frozenset(ids))


def _module_prefixes(cfg: ModelConfig, module_id: str) -> tuple[str, ...]:
    if module_id == "gaze_embed":
        return ("gaze_embed.",)
    if module_id.startswith("render_block_"):
        idx = int(module_id.rsplit("_", 1)[1])
        if idx >= len(cfg.render_channels) - 1:
            raise ContractError(f"render block {idx} does not exist")
        # Block 0 owns the stem conv feeding the residual pyramid.
        if idx == 0:
            return ("render.input_conv.", "render.blocks.0.")
        return (f"render.blocks.{idx}.",)
    if module_id.startswith("glg_"):
        rest = module_id[len("glg_") :]
        part = None
        if "." in rest:
            rest, part = rest.split(".", 1)
        if rest not in cfg.components:
            raise ContractError(f"unknown component in freeze id {module_id!r}")
        root = f"locals.{rest}."
        if part is None:
            return (root,)
        if part == "shape":
            return (root + "base_convs.", root + "shape_convs.", root + "depth_head.")
        if part == "texture":
            return (root + "texture_convs.", root + "feature_head.")
        raise ContractError(f"unknown GLG part in freeze id {module_id!r}")
    raise ContractError(f"unknown freeze module id {module_id!r}")


def frozen_param_names(gen: CompositionalGenerator, policy: FreezePolicy) -> tuple[str, ...]:
    prefixes: list[str] = []
    for module_id in sorted(policy.modules):
        prefixes.extend(_module_prefixes(gen.cfg, module_id))
    names = [n for n, _ in gen.named_parameters() if any(n.startswith(p) for p in prefixes)]
    if not names:
        raise ContractError("freeze policy matched no parameters")
    return tuple(sorted(names))


def freeze_modules(gen: CompositionalGenerator, policy: FreezePolicy) -> tuple[str, ...]:
    """Disable gradients for the policy's parameters; returns their names."""
    names = frozen_param_names(gen, policy)
    wanted = set(names)
    for n, p in gen.named_parameters():
        if n in wanted:
            p.requires_grad_(False)
    return names


def frozen_hash(gen: nn.Module, names: Iterable[str]) -> str:
    """SHA-256 over the frozen parameters' bytes, in sorted name order."""
    state = dict(gen.named_parameters())
    h = hashlib.sha256()
    for name in sorted(names):
        h.update(name.encode())
        h.update(state[name].detach().cpu().numpy().tobytes())
    return h.hexdigest()


def default_freeze_ids(cfg: ModelConfig) -> tuple[str, ...]:
    """Ablation row 4: every gaze-aware local generator plus the first two
    render blocks (and the gaze embedding feeding the GLGs)."""
    glgs = tuple(f"glg_{c}" for c in cfg.conditioned)
    return glgs + ("gaze_embed", "render_block_0", "render_block_1")


def parse_freeze_spec(spec: str, cfg: ModelConfig) -> tuple[str, ...]:
    """Expand a CLI freeze spec like ``glg,render0,render1`` into module ids.

    ``glg`` means every gaze-aware local generator plus the gaze embedding;
    ``renderN`` is shorthand for ``render_block_N``; anything else passes
    through unchanged (e.g. ``glg_iris.shape``).
    """
    ids: list[str] = []
    for token in (t.strip() for t in spec.split(",") if t.strip()):
        if token == "glg":
            ids.extend(f"glg_{c}" for c in cfg.conditioned)
            ids.append("gaze_embed")
        elif token.startswith("render") and token[len("render") :].isdigit():
            ids.append(f"render_block_{token[len('render'):]}")
        else:
            ids.append(token)
    return tuple(dict.fromkeys(ids))


def ablation_policy(cfg: ModelConfig, row: int) -> tuple[FreezePolicy, bool]:
    """(freeze policy, mask-constraint flag) for the studied stage-2 variants."""
    glgs = tuple(f"glg_{c}" for c in cfg.conditioned)
    shape_only = tuple(f"glg_{c}.shape" for c in cfg.conditioned)
    table = {
        1: (shape_only + ("gaze_embed",), True),
        2: (glgs + ("gaze_embed",), True),
        3: (glgs + ("gaze_embed", "render_block_0"), True),
        4: (glgs + ("gaze_embed", "render_block_0", "render_block_1"), True),
        5: (glgs + ("gaze_embed", "render_block_0", "render_block_1"), False),
    }
    if row not in table:
        raise ContractError(f"unknown ablation row {row}")
    ids, mask_constraint = table[row]
    return FreezePolicy.of(*ids), mask_constraint


# ---------------------------------------------------------------------------
# Reports


@dataclass
class LossReport:
    """Per-step loss breakdown. ``terms`` hold raw (unweighted) values; lazy
    regularizers already include their cadence multiplier. Totals satisfy
    total = sum(weight * term) over the step's active terms."""

    step: int
    stage: str
    g_terms: dict[str, float]
    d_terms: dict[str, float]
    weights: dict[str, float]
    total_g: float
    total_d: float
    d_real_logit: float
    d_fake_logit: float
    fake_mask_provenance: Optional[str] = None

    def as_row(self) -> dict[str, float]:
        row = {"step": self.step, "total_g": self.total_g, "total_d": self.total_d,
               "d_real_logit": self.d_real_logit, "d_fake_logit": self.d_fake_logit}
        for k, v in self.g_terms.items():
            row[f"g_{k}"] = v
        for k, v in self.d_terms.items():
            row[f"d_{k}"] = v
        return row

    def check_finite(self) -> None:
        vals = {**self.g_terms, **self.d_terms,
                "total_g": self.total_g, "total_d": self.total_d}
        bad = {k: v for k, v in vals.items() if not math.isfinite(v)}
        if bad:
            raise NonFiniteLossError(f"non-finite loss terms at step {self.step}: {bad}",
                                     dump={"step": self.step, "terms": vals})


def _weight_table(weights: LossWeights, mismatch_weight: float) -> dict[str, float]:
    return {
        "adversarial": weights.adversarial,
        "mismatch": weights.adversarial * mismatch_weight,
        "r1": weights.r1,
        "path_length": weights.path_length,
        "mask_consistency": weights.mask_consistency,
        "mask_coverage": weights.mask_coverage,
        "gaze_mask": weights.gaze_mask,
    }


def _weighted_total(terms: dict[str, float], table: dict[str, float]) -> float:
    return sum(table[name] * value for name, value in terms.items())


# ---------------------------------------------------------------------------
# Trainers


class _TrainerBase:
    stage = "base"

    def __init__(
        self,
        generator: CompositionalGenerator,
        discriminator: GazeDiscriminator,
        data: TensorDataset,
        cfg: TrainConfig,
        gaze_stats: np.ndarray,
        run_dir: Optional[Path] = None,
    ):
        self.g = generator
        self.d = discriminator
        self.data = data
        self.cfg = cfg
        self.gaze_stats = np.asarray(gaze_stats, dtype=np.float64)
        self.run_dir = Path(run_dir) if run_dir else None
        self.step_idx = 0
        self.g_steps = 0
        self.rng = np.random.default_rng(cfg.seed)
        self.torch_rng = torch.Generator().manual_seed(cfg.seed)
        self.pl = PathLengthRegularizer(cfg.pl_decay)
        self.opt_g = torch.optim.Adam(
            [p for p in self.g.parameters() if p.requires_grad],
            lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
        )
        self.opt_d = torch.optim.Adam(self.d.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
        self.history: list[LossReport] = []
        # Exponential moving average of generator weights; the serving copy.
        self.g_ema = CompositionalGenerator(self.g.cfg)
        self.g_ema.load_state_dict(self.g.state_dict())
        self.g_ema.eval()
        for p in self.g_ema.parameters():
            p.requires_grad_(False)
        self.ema_decay = cfg.ema_decay

    @torch.no_grad()
    def _update_ema(self) -> None:
        for (name, p_ema), (_, p) in zip(self.g_ema.named_parameters(), self.g.named_parameters()):
            p_ema.lerp_(p, 1.0 - self.ema_decay)
        for b_ema, b in zip(self.g_ema.buffers(), self.g.buffers()):
            b_ema.copy_(b)

    # -- sampling helpers ---------------------------------------------------

    def _real_batch(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        idx = torch.from_numpy(self.rng.integers(0, len(self.data), size=self.cfg.batch_size))
        return self.data.batch(idx)

    def _fake_latent(self, n: int) -> LatentCode:
        z = torch.randn(n, self.g.cfg.z_dim, generator=self.torch_rng)
        code = self.g.map_latent(z)
        if self.cfg.style_mix_prob > 0 and self.rng.random() < self.cfg.style_mix_prob:
            z2 = torch.randn(n, self.g.cfg.z_dim, generator=self.torch_rng)
            code = style_mix(code, self.g.map_latent(z2), random_mix_plan(self.g.cfg.components, self.torch_rng))
        return code

    def _fake_gaze(self, n: int) -> torch.Tensor:
        arr = sample_gaze(self.gaze_stats, n, self.rng, self.cfg.gaze_sampling)
        return torch.from_numpy(arr).to(torch.float32)

    def _score(self, image: torch.Tensor, mask: torch.Tensor, gaze: Optional[torch.Tensor]) -> torch.Tensor:
        if self.d.conditioned:
            return self.d.score_labeled(image, mask, gaze)
        return self.d.score_unlabeled(image, mask)

    # -- shared step machinery ----------------------------------------------

    def _d_step(self, batch) -> tuple[dict[str, float], float, float]:
        real_img, real_mask, real_gaze = batch
        code = self._fake_latent(real_img.shape[0])
        fake_gaze = self._fake_gaze(real_img.shape[0])
        with torch.no_grad():
            fake_img, fake_mask, _ = self._fake_pair(code, fake_gaze)

        d_real = self._score(real_img, real_mask, real_gaze if self.d.conditioned else None)
        d_fake = self._score(fake_img, fake_mask, fake_gaze if self.d.conditioned else None)
        adv = nonsat_d_loss(d_real, d_fake)
        terms = {"adversarial": adv.item()}
        loss = self.cfg.weights.adversarial * adv

        if self.d.conditioned and self.cfg.mismatch_weight > 0:
            # Matching-aware conditioning: a real pair under a resampled gaze
            # must score fake, which keeps the gaze pathway informative.
            wrong_gaze = self._fake_gaze(real_img.shape[0])
            d_mismatch = self._score(real_img, real_mask, wrong_gaze)
            mm = F.softplus(d_mismatch).mean()
            terms["mismatch"] = mm.item()
            loss = loss + self.cfg.weights.adversarial * self.cfg.mismatch_weight * mm

        if self.cfg.weights.r1 > 0 and self.step_idx % self.cfg.r1_interval == 0:
            img_r = real_img.detach().requires_grad_(True)
            mask_r = real_mask.detach().requires_grad_(True)
            score = self._score(img_r, mask_r, real_gaze if self.d.conditioned else None)
            r1 = r1_penalty(score, (img_r, mask_r)) * self.cfg.r1_interval
            terms["r1"] = r1.item()
            loss = loss + self.cfg.weights.r1 * r1

        self.opt_d.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_d.step()
        return terms, d_real.mean().item(), d_fake.mean().item()

    def _fake_pair(self, code: LatentCode, gaze: torch.Tensor):
        """Returns (image, mask fed to D, aux). Overridden by stage 2."""
        pair, aux = self.g.generate(code, gaze, return_aux=True)
        pair.mask._gcgan_provenance = TRAINABLE_TAG
        return pair.image, pair.mask, aux

    def _g_extra_terms(self, aux, pair_mask) -> dict[str, torch.Tensor]:
        return {}

    def _g_step(self) -> dict[str, float]:
        code = self._fake_latent(self.cfg.batch_size)
        gaze = self._fake_gaze(self.cfg.batch_size)
        pair, aux = self.g.generate(code, gaze, return_aux=True)
        d_mask = self._d_input_mask(pair, aux)
        d_out = self._score(pair.image, d_mask, gaze if self.d.conditioned else None)

        terms_t: dict[str, torch.Tensor] = {
            "adversarial": nonsat_g_loss(d_out),
            "mask_consistency": mask_consistency_loss(aux["coarse_masks"], pair.mask),
            "mask_coverage": mask_coverage_loss(pair.mask),
        }
        terms_t.update(self._g_extra_terms(aux, pair.mask))

        w = self.cfg.weights
        loss = (
            w.adversarial * terms_t["adversarial"]
            + w.mask_consistency * terms_t["mask_consistency"]
            + w.mask_coverage * terms_t["mask_coverage"]
        )
        if "gaze_mask" in terms_t:
            loss = loss + w.gaze_mask * terms_t["gaze_mask"]

        if w.path_length > 0 and self.g_steps % self.cfg.pl_interval == 0:
            n_pl = max(1, self.cfg.batch_size // self.cfg.pl_batch_shrink)
            z = torch.randn(n_pl, self.g.cfg.z_dim, generator=self.torch_rng)
            pl_code = self.g.map_latent(z)
            pl_pair = self.g.generate(pl_code, self._fake_gaze(n_pl))
            pl = self.pl(pl_pair.image, pl_code.tensor) * self.cfg.pl_interval
            terms_t["path_length"] = pl
            loss = loss + w.path_length * pl

        self.opt_g.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_g.step()
        self._update_ema()
        self.g_steps += 1
        return {k: v.item() for k, v in terms_t.items()}

    def _d_input_mask(self, pair, aux) -> torch.Tensor:
        return pair.mask

    def step(self, batch=None) -> LossReport:
        """One alternating discriminator + generator update."""
        batch = batch if batch is not None else self._real_batch()
        d_terms, d_real, d_fake = self._d_step(batch)
        g_terms = self._g_step()
        weights = _weight_table(self.cfg.weights, self.cfg.mismatch_weight)
        report = LossReport(
            step=self.step_idx,
            stage=self.stage,
            g_terms=g_terms,
            d_terms=d_terms,
            weights=weights,
            total_g=_weighted_total(g_terms, weights),
            total_d=_weighted_total(d_terms, weights),
            d_real_logit=d_real,
            d_fake_logit=d_fake,
            fake_mask_provenance=self._provenance(),
        )
        self._dump_on_failure(report)
        self.step_idx += 1
        self.history.append(report)
        return report

    def _provenance(self) -> Optional[str]:
        return None

    def _dump_on_failure(self, report: LossReport) -> None:
        try:
            report.check_finite()
        except NonFiniteLossError:
            if self.run_dir is not None:
                self.run_dir.mkdir(parents=True, exist_ok=True)
                (self.run_dir / "loss_dump.json").write_text(json.dumps(report.as_row(), sort_keys=True))
            raise

    # -- loop + persistence ---------------------------------------------------

    def train(self, steps: Optional[int] = None, callback: Optional[Callable[[LossReport], None]] = None) -> None:
        steps = steps if steps is not None else self.cfg.steps
        rows = []
        for _ in range(steps):
            report = self.step()
            if callback is not None:
                callback(report)
            if self.step_idx % self.cfg.log_every == 0 or self.step_idx == steps:
                rows.append(report.as_row())
                log.info("step %d: total_g=%.4f total_d=%.4f", report.step, report.total_g, report.total_d)
            if self.run_dir is not None and self.cfg.checkpoint_every > 0 and self.step_idx % self.cfg.checkpoint_every == 0:
                save_bundle(self.bundle(), self.run_dir / "latest.gcgn")
        if self.run_dir is not None and rows:
            self._write_logs(rows)

    def _write_logs(self, rows: list[dict[str, float]]) -> None:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        csv_path = self.run_dir / "losses.csv"
        keys = sorted({k for row in rows for k in row})
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys)
            writer.writeheader()
            writer.writerows(rows)
        try:
            from .reporting import plot_loss_curves

            plot_loss_curves(csv_path, self.run_dir / "losses.png")
        except Exception as exc:  # noqa: BLE001 - figures must not kill training
            log.warning("loss figure rendering failed: %s", exc)

    def bundle(self) -> ModelBundle:
        """Snapshot for serving/adaptation; generator weights are the EMA copy."""
        return ModelBundle(
            config=self.g.cfg,
            stage=self.stage,
            step=self.step_idx,
            generator_state={k: v.detach().clone() for k, v in self.g_ema.state_dict().items()},
            discriminator_state={k: v.detach().clone() for k, v in self.d.state_dict().items()},
            opt_g_state=self.opt_g.state_dict(),
            opt_d_state=self.opt_d.state_dict(),
            freeze_manifest=getattr(self, "frozen_names", ()),
            extra={"pl_ema": float(self.pl.ema), "pl_steps": int(self.pl.steps)},
            extra_arrays={"gaze_stats": self.gaze_stats.astype(np.float64)},
        )


class Stage1Trainer(_TrainerBase):
    """Adversarial training on the labeled domain with the gaze-conditioned
    discriminator scoring (image, mask, gaze) triples."""

    stage = "stage1"

    def __init__(self, model_cfg: ModelConfig, data: TensorDataset, cfg: TrainConfig,
                 run_dir: Optional[Path] = None):
        if not len(data):
            raise ContractError("stage 1 requires a non-empty labeled dataset")
        gaze_stats = data.labeled_gazes()
        if gaze_stats.size == 0:
            raise ContractError("stage 1 requires gaze labels")
        generator = CompositionalGenerator(model_cfg)
        discriminator = GazeDiscriminator(model_cfg, conditioned=True)
        super().__init__(generator, discriminator, data, cfg, gaze_stats, run_dir)


class Stage2Trainer(_TrainerBase):
    """Domain adaptation: freeze gaze-bearing modules, feed the frozen
    stage-1 model's mask as the fake mask, and penalize mask drift."""

    stage = "stage2"

    def __init__(
        self,
        stage1: ModelBundle,
        data: TensorDataset,
        cfg: TrainConfig,
        run_dir: Optional[Path] = None,
        policy: Optional[FreezePolicy] = None,
        mask_constraint: bool = True,
    ):
        if stage1.stage != "stage1":
            raise ContractError(f"stage-2 init bundle must be stage1, got {stage1.stage!r}")
        generator = CompositionalGenerator(stage1.config)
        generator.load_state_dict(stage1.generator_state)
        generator.train()

        self.frozen_model = stage1.build_generator()  # read-only reference
        for p in self.frozen_model.parameters():
            p.requires_grad_(False)

        if policy is None:
            # Auto-derive: reuse the bundle's manifest when present, else default.
            ids = stage1.freeze_manifest or default_freeze_ids(stage1.config)
            policy = FreezePolicy.of(*ids)
        self.policy = policy
        self.frozen_names = freeze_modules(generator, policy)
        self.frozen_hash_at_start = frozen_hash(generator, self.frozen_names)
        self.mask_constraint = mask_constraint

        discriminator = GazeDiscriminator(stage1.config, conditioned=False)
        super().__init__(generator, discriminator, data, cfg, stage1.gaze_stats(), run_dir)

    def _frozen_mask(self, code: LatentCode, gaze: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            frozen_pair = self.frozen_model.generate(code, gaze)
        mask = frozen_pair.mask
        mask._gcgan_provenance = FROZEN_TAG
        return mask

    def _fake_pair(self, code: LatentCode, gaze: torch.Tensor):
        pair, aux = self.g.generate(code, gaze, return_aux=True)
        pair.mask._gcgan_provenance = TRAINABLE_TAG
        if self.mask_constraint:
            mask = self._frozen_mask(code, gaze)
        else:
            mask = pair.mask
        return pair.image, mask, aux

    def _d_input_mask(self, pair, aux) -> torch.Tensor:
        if not self.mask_constraint:
            return pair.mask
        mask = self._frozen_mask(aux["latent"], aux["gaze"])
        if getattr(mask, "_gcgan_provenance", None) != FROZEN_TAG:
            raise ContractError("stage-2 fake mask must come from the frozen model")
        aux["frozen_mask"] = mask
        return mask

    def _g_extra_terms(self, aux, pair_mask) -> dict[str, torch.Tensor]:
        if not self.mask_constraint:
            return {}
        frozen = aux.get("frozen_mask")
        if frozen is None:
            frozen = self._frozen_mask(aux["latent"], aux["gaze"])
        return {"gaze_mask": F.mse_loss(pair_mask, frozen)}

    def _provenance(self) -> Optional[str]:
        return FROZEN_TAG if self.mask_constraint else TRAINABLE_TAG

    def verify_frozen(self) -> None:
        current = frozen_hash(self.g, self.frozen_names)
        if current != self.frozen_hash_at_start:
            raise ContractError("frozen-parameter drift detected in stage 2")

    def step(self, batch=None) -> LossReport:
        report = super().step(batch)
        if self.step_idx % 100 == 0:
            self.verify_frozen()
        return report

    def bundle(self) -> ModelBundle:
        b = super().bundle()
        b.extra["mask_constraint"] = self.mask_constraint
        return b


# ---------------------------------------------------------------------------
# Entry points


def checkpoint_save(bundle: ModelBundle, path: str | Path) -> Path:
    return save_bundle(bundle, path)


def checkpoint_load(path: str | Path) -> ModelBundle:
    return load_bundle(path)


def train_stage1(
    model_cfg: ModelConfig,
    data: TensorDataset,
    cfg: TrainConfig,
    run_dir: Optional[Path] = None,
) -> ModelBundle:
    from .core import seed_everything

    seed_everything(cfg.seed)
    trainer = Stage1Trainer(model_cfg, data, cfg, run_dir)
    trainer.train()
    bundle = trainer.bundle()
    if run_dir is not None:
        save_bundle(bundle, Path(run_dir) / "stage1.gcgn")
    return bundle


def train_stage2(
    stage1: ModelBundle,
    data: TensorDataset,
    cfg: TrainConfig,
    run_dir: Optional[Path] = None,
    policy: Optional[FreezePolicy] = None,
    mask_constraint: bool = True,
) -> ModelBundle:
    from .core import seed_everything

    seed_everything(cfg.seed)
    if cfg.freeze and policy is None:
        policy = FreezePolicy.of(*cfg.freeze)
    trainer = Stage2Trainer(stage1, data, cfg, run_dir, policy, mask_constraint)
    trainer.train()
    trainer.verify_frozen()
    bundle = trainer.bundle()
    if run_dir is not None:
        save_bundle(bundle, Path(run_dir) / "stage2.gcgn")
    return bundle
