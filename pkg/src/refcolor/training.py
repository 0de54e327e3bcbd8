"""Multi-stage training: trainable sets, reference drop, per-stage conditioning, freezing audit."""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields, replace
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import EmbeddingSet, ModelConfig
from .checkpoint import PREREQUISITE, STAGE_ORDER, Checkpoint, ProvenanceError, ScheduleConfig, clone_checkpoint
from .core_math import NoiseSchedule, diffuse, diffusion_loss
from .datagen import ImageTriple, TrainingBatch, make_training_batch
from .injection import InjectionBundle, Thresholds, mask_pyramid, token_flags
from .model import GROUP_NAMES, ColorizationModel

logger = logging.getLogger(__name__)

TRAINABLE = {
    "0": frozenset({"vae"}),
    "1a": frozenset({"unet", "sketch_encoder"}),
    "1b": frozenset({"unet", "sketch_encoder"}),
    "2": frozenset({"bg_encoder", "bg_injection", "lora_split_attn"}),
    "3": frozenset({"style_encoder", "style_injection"}),
}
DEFAULT_DROP = {"0": 0.0, "1a": 0.8, "1b": 0.5, "2": 0.5, "3": 0.5}
DEFAULT_LR = {"0": 1e-3, "1a": 1e-4, "1b": 1e-4, "2": 1e-4, "3": 1e-4}


def select_trainable(stage_id: str) -> frozenset:
    if stage_id not in TRAINABLE:
        raise ValueError(f"unknown stage {stage_id!r}; expected one of {STAGE_ORDER}")
    return TRAINABLE[stage_id]


@dataclass(frozen=True)
class StageConfig:
    stage_id: str = "1a"
    steps: int = 100
    learning_rate: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    batch_size: int = 8
    reference_drop_rate: float | None = None
    bg_branch_activation_rate: float = 0.5
    kl_weight: float = 1e-6
    seed: int = 0
    ts_s: float = 0.5
    ts_r: float = 0.5
    log_every: int = 50

    def __post_init__(self):
        select_trainable(self.stage_id)
        if self.learning_rate is None:
            object.__setattr__(self, "learning_rate", DEFAULT_LR[self.stage_id])
        if self.reference_drop_rate is None:
            object.__setattr__(self, "reference_drop_rate", DEFAULT_DROP[self.stage_id])
        for name in ("reference_drop_rate", "bg_branch_activation_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        Thresholds(self.ts_s, self.ts_r)

    @property
    def trainable_groups(self) -> frozenset:
        return select_trainable(self.stage_id)

    @property
    def betas(self) -> tuple:
        return (self.beta1, self.beta2)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass(frozen=True)
class DropPolicy:
    rate: float

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError("drop rate must lie in [0, 1]")


def drop_decisions(batch: int, policy: DropPolicy, rng: torch.Generator) -> torch.Tensor:
    """Per-sample booleans, True where the reference is replaced by the null embedding."""
    return torch.rand(batch, generator=rng, dtype=torch.float64) < policy.rate


def apply_reference_drop(tokens: EmbeddingSet, policy: DropPolicy, rng: torch.Generator) -> EmbeddingSet:
    dropped = drop_decisions(tokens.local.shape[0], policy, rng)
    return tokens.select(~dropped)


# -- one optimisation step ------------------------------------------------------------------


def make_optimizer(model: ColorizationModel, cfg: StageConfig) -> torch.optim.Optimizer:
    params = [p for name in sorted(cfg.trainable_groups) for p in model.group(name).parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=cfg.learning_rate, betas=cfg.betas, weight_decay=cfg.weight_decay)


def _vae_loss(model: ColorizationModel, batch: TrainingBatch, cfg: StageConfig, rng):
    x = batch.color
    mean, logvar = model.vae.posterior(x)
    noise = torch.randn(mean.shape, generator=rng, dtype=mean.dtype)
    z = mean + torch.exp(0.5 * logvar) * noise
    recon = model.vae.decode_raw(z)
    kl = 0.5 * torch.mean(mean.pow(2) + logvar.exp() - 1.0 - logvar)
    return F.mse_loss(recon, x) + cfg.kl_weight * kl


def build_training_bundle(model: ColorizationModel, batch: TrainingBatch, cfg: StageConfig, rng,
                          z_ref: torch.Tensor | None = None, emb: EmbeddingSet | None = None):
    """Stage 2/3 injection bundle. Stage-3 background activation is decided per sample."""
    mcfg = model.cfg
    thr = Thresholds(cfg.ts_s, cfg.ts_r)
    masks = mask_pyramid(batch.mask, mcfg.level_shapes)
    flags = token_flags(batch.reference_mask, mcfg.token_grid, cfg.ts_r)
    with torch.no_grad():
        z_ref_bg = model.vae.encode(batch.reference_bg)
        e_bg = model.embed_reference(batch.reference_bg)
    if cfg.stage_id == "2":
        z_bg = model.encode_background(z_ref_bg, e_bg)
        return InjectionBundle(z_bg=z_bg, sketch_masks=masks, ref_mask_token_flags=flags,
                               thresholds=thr, lora_active=True)
    active = torch.rand(len(batch), generator=rng, dtype=torch.float64) < cfg.bg_branch_activation_rate
    with torch.no_grad():
        z_bg = model.encode_background(z_ref_bg, e_bg)
    keep = active[:, None, None, None]
    masks = [torch.where(keep, m, torch.ones_like(m)) for m in masks]
    flags = torch.where(active[:, None], flags, torch.ones_like(flags))
    z_style = model.encode_style(z_ref, emb)
    return InjectionBundle(z_bg=z_bg, z_style=z_style, sketch_masks=masks, ref_mask_token_flags=flags,
                           thresholds=thr, lora_active=True)


def _diffusion_step_loss(model: ColorizationModel, batch: TrainingBatch, cfg: StageConfig,
                         schedule: NoiseSchedule, rng):
    with torch.no_grad():
        z0 = model.vae.encode(batch.color)
        emb = model.embed_reference(batch.reference)
        z_ref = model.vae.encode(batch.reference) if cfg.stage_id == "3" else None
    B = z0.shape[0]
    t = torch.randint(0, schedule.T, (B,), generator=rng)
    eps = torch.randn(z0.shape, generator=rng, dtype=z0.dtype)
    z_t = diffuse(z0, eps, t, schedule)
    tokens = apply_reference_drop(emb, DropPolicy(cfg.reference_drop_rate), rng).local
    if cfg.stage_id in ("1a", "1b"):
        feats = model.sketch_encode(batch.sketch)
        bundle = None
    else:
        with torch.no_grad():
            feats = model.sketch_encode(batch.sketch)
        bundle = build_training_bundle(model, batch, cfg, rng, z_ref=z_ref, emb=emb)
    eps_hat = model.predict_noise(z_t, t, feats, tokens, bundle, schedule)
    return diffusion_loss(eps_hat, eps)


def train_step(batch: TrainingBatch, model: ColorizationModel, stage_cfg: StageConfig, rng: torch.Generator,
               optimizer: torch.optim.Optimizer, schedule: NoiseSchedule) -> float:
    """One optimiser update of the stage's trainable groups; returns the loss."""
    if batch.stage_id != stage_cfg.stage_id:
        raise ValueError(f"batch built for stage {batch.stage_id}, config is stage {stage_cfg.stage_id}")
    if stage_cfg.stage_id == "0":
        loss = _vae_loss(model, batch, stage_cfg, rng)
    else:
        loss = _diffusion_step_loss(model, batch, stage_cfg, schedule, rng)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss.item()} at stage {stage_cfg.stage_id}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


# -- whole stages --------------------------------------------------------------------------


class FreezeViolation(RuntimeError):
    """A group outside the stage's trainable set changed during the stage."""


def freezing_audit(before: dict, after: dict, trainable) -> list[str]:
    return sorted(name for name in GROUP_NAMES if name not in trainable and before[name] != after[name])


@torch.no_grad()
def calibrate_latent_scale(model: ColorizationModel, triples: Sequence[ImageTriple]) -> float:
    model.vae.latent_scale.fill_(1.0)
    x = torch.from_numpy(np.stack([t.color for t in triples]))
    std = float(model.vae.encode(x).std())
    scale = 1.0 / max(std, 1e-6)
    model.vae.latent_scale.fill_(scale)
    return scale


def check_prerequisite(stage_id: str, checkpoint: Checkpoint | None) -> None:
    need = PREREQUISITE[stage_id]
    if need is None:
        return
    if checkpoint is None:
        raise ProvenanceError(f"stage {stage_id} needs an input checkpoint that completed stage {need}")
    checkpoint.require_stage(need, f"stage {stage_id}")


def run_stage(stage_cfg: StageConfig, dataset: Sequence[ImageTriple], checkpoint_in: Checkpoint | None,
              log: Callable[[str], None] | None = None, model_config: ModelConfig | None = None,
              schedule: ScheduleConfig | None = None) -> Checkpoint:
    """Run one training stage and return a new checkpoint; ``checkpoint_in`` is left untouched.

    ``model_config`` and ``schedule`` only apply when starting from scratch
    (stage 0 without an input checkpoint).
    """
    stage = stage_cfg.stage_id
    check_prerequisite(stage, checkpoint_in)
    if not dataset:
        raise ValueError("empty training set")
    if checkpoint_in is not None:
        ckpt = clone_checkpoint(checkpoint_in)
    else:
        ckpt = Checkpoint.fresh(model_config, schedule)
    model = ckpt.model
    image_size = model.cfg.image_size
    if stage == "2":
        model.init_from_unet_encoder("bg_encoder")
    elif stage == "3":
        model.init_from_unet_encoder("style_encoder")

    model.set_trainable(stage_cfg.trainable_groups)
    before = model.checksums()
    optimizer = make_optimizer(model, stage_cfg)
    noise_schedule = ckpt.schedule.build()
    data_rng = np.random.default_rng(stage_cfg.seed)
    torch_rng = torch.Generator().manual_seed(stage_cfg.seed)
    losses = []
    n = len(dataset)
    for step in range(1, stage_cfg.steps + 1):
        idx = data_rng.choice(n, size=stage_cfg.batch_size, replace=n < stage_cfg.batch_size)
        batch = make_training_batch([dataset[i] for i in idx], stage, data_rng, image_size)
        loss = train_step(batch, model, stage_cfg, torch_rng, optimizer, noise_schedule)
        losses.append(loss)
        if log is not None and (step % stage_cfg.log_every == 0 or step == stage_cfg.steps):
            log(f"stage {stage} step {step}/{stage_cfg.steps} loss {loss:.6f}")
    if stage == "0":
        scale = calibrate_latent_scale(model, dataset)
        logger.info("latent scale set to %.6f", scale)
    model.requires_grad_(False)
    after = model.checksums()
    changed = freezing_audit(before, after, stage_cfg.trainable_groups)
    if changed:
        raise FreezeViolation(f"stage {stage} modified frozen groups {changed}")
    ckpt.stages = [s for s in ckpt.stages if s != stage] + [stage]
    ckpt.seeds[stage] = stage_cfg.seed
    ckpt.steps[stage] = stage_cfg.steps
    ckpt.history = {"losses": losses, "checksums_before": before, "checksums_after": after}
    return ckpt


def stage_config(stage_id: str, **overrides) -> StageConfig:
    known = set(StageConfig.field_names())
    bad = set(overrides) - known
    if bad:
        raise KeyError(f"unknown stage config keys {sorted(bad)}")
    return replace(StageConfig(stage_id=stage_id), **overrides) if overrides else StageConfig(stage_id=stage_id)
