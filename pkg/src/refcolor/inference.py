"""Inference modes and end-to-end colorization."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ._validation import check_image, check_mask, check_same_hw
from .checkpoint import Checkpoint
from .core_math import GuidanceConfig, sample
from .datagen import bleach_background
from .injection import InjectionBundle, Thresholds, mask_pyramid, token_flags
from .model import ColorizationModel

logger = logging.getLogger(__name__)

MODES = ("vanilla", "style", "background", "full")
# the stage whose groups each mode switches on
MODE_REQUIRES = {"vanilla": "0", "style": "3", "background": "2", "full": "3"}


class MissingMaskError(ValueError):
    """Background and full modes need both the sketch and the reference mask."""


@dataclass
class InferenceRequest:
    sketch: np.ndarray
    reference: np.ndarray
    sketch_mask: np.ndarray | None = None
    reference_mask: np.ndarray | None = None
    mode: str = "vanilla"
    thresholds: Thresholds = field(default_factory=Thresholds)
    guidance: float = 3.0
    steps: int = 50
    seed: int = 0
    second_order: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        self.sketch = check_image(self.sketch, channels=1, name="sketch")
        self.reference = check_image(self.reference, channels=3, name="reference")
        if self.sketch_mask is not None:
            self.sketch_mask = check_mask(self.sketch_mask, name="sketch_mask")
            check_same_hw(self.sketch, self.sketch_mask)
        if self.reference_mask is not None:
            self.reference_mask = check_mask(self.reference_mask, name="reference_mask")
            check_same_hw(self.reference, self.reference_mask)
        if self.mode in ("background", "full") and (self.sketch_mask is None or self.reference_mask is None):
            raise MissingMaskError(f"{self.mode} mode needs both sketch_mask and reference_mask")
        if self.guidance < 0:
            raise ValueError("guidance must be >= 0")

    @property
    def uses_style(self) -> bool:
        return self.mode in ("style", "full")

    @property
    def uses_background(self) -> bool:
        return self.mode in ("background", "full")


def _resize(t: torch.Tensor, hw) -> torch.Tensor:
    if tuple(t.shape[-2:]) == tuple(hw):
        return t
    return F.interpolate(t, size=tuple(hw), mode="bilinear", align_corners=False, antialias=True).clamp(0, 1)


def _level_shapes(model: ColorizationModel, hw) -> list[tuple[int, int]]:
    f = model.cfg.vae_factor
    return [(hw[0] // f >> l, hw[1] // f >> l) for l in range(len(model.cfg.unet_channels))]


def _stack(reqs, attr):
    return torch.from_numpy(np.stack([getattr(r, attr) for r in reqs]))


@torch.no_grad()
def assemble_injections(reqs: Sequence[InferenceRequest] | InferenceRequest, model: ColorizationModel) -> InjectionBundle:
    """Build the injection bundle for a batch of requests that share a mode."""
    if isinstance(reqs, InferenceRequest):
        reqs = [reqs]
    req = reqs[0]
    if any(r.mode != req.mode for r in reqs):
        raise ValueError("all requests in a batch must share a mode")
    if req.mode == "vanilla":
        return InjectionBundle(thresholds=req.thresholds)
    hw = req.sketch.shape[-2:]
    reference = _resize(_stack(reqs, "reference"), hw)
    bundle = InjectionBundle(thresholds=req.thresholds)
    if req.uses_style:
        emb = model.embed_reference(reference)
        bundle.z_style = model.encode_style(model.vae.encode(reference), emb)
    if req.uses_background:
        ref_masks = _resize(_stack(reqs, "reference_mask"), hw)
        ref_bg = torch.from_numpy(np.stack([
            bleach_background(r.reference, r.reference_mask, invert=True) for r in reqs
        ]))
        ref_bg = _resize(ref_bg, hw)
        e_bg = model.embed_reference(ref_bg)
        bundle.z_bg = model.encode_background(model.vae.encode(ref_bg), e_bg)
        bundle.sketch_masks = mask_pyramid(_stack(reqs, "sketch_mask"), _level_shapes(model, hw))
        grid_ref = _resize(ref_masks, (model.cfg.image_size, model.cfg.image_size))
        flags = token_flags(grid_ref, model.cfg.token_grid, req.thresholds.ts_r)
        for i, row in enumerate(flags):
            if bool(row.all()) or not bool(row.any()):
                side = "background" if bool(row.all()) else "foreground"
                logger.info("request %d: empty %s token partition, falling back to all tokens", i, side)
        bundle.ref_mask_token_flags = flags
        bundle.lora_active = True
    return bundle


def _check_size(model: ColorizationModel, hw) -> None:
    div = model.cfg.vae_factor * 2 ** (len(model.cfg.unet_channels) - 1)
    if hw[0] % div or hw[1] % div:
        raise ValueError(f"sketch size {tuple(hw)} must be divisible by {div}")


@torch.no_grad()
def colorize_batch(reqs: Sequence[InferenceRequest], ckpt: Checkpoint) -> np.ndarray:
    """Colorize requests sharing mode, steps and guidance; returns ``(N, 3, H, W)``."""
    if not reqs:
        return np.zeros((0, 3, 0, 0), dtype=np.float32)
    req = reqs[0]
    for r in reqs[1:]:
        if (r.mode, r.steps, r.guidance, r.second_order, r.thresholds) != (
            req.mode, req.steps, req.guidance, req.second_order, req.thresholds
        ):
            raise ValueError("batched requests must share mode, steps, guidance and thresholds")
        if r.sketch.shape != req.sketch.shape:
            raise ValueError("batched sketches must share a size")
    ckpt.require_stage(MODE_REQUIRES[req.mode], f"{req.mode} mode")
    model = ckpt.model
    hw = req.sketch.shape[-2:]
    _check_size(model, hw)

    sketches = _stack(reqs, "sketch")
    references = _stack(reqs, "reference")
    tokens = model.embed_reference(references).local
    feats = model.sketch_encode(sketches)
    bundle = assemble_injections(reqs, model)
    null = (torch.zeros_like(tokens), None)

    sched = ckpt.schedule.build()

    def denoiser(z_t, t, cond):
        toks, bun = cond
        return model.predict_noise(z_t, t, feats, toks, bun, sched)

    f = model.cfg.vae_factor
    shape = (len(reqs), model.cfg.latent_channels, hw[0] // f, hw[1] // f)
    latent = sample(
        denoiser,
        (tokens, None if bundle.is_vanilla else bundle),
        sched,
        req.steps,
        GuidanceConfig(req.guidance, null),
        [r.seed for r in reqs],
        shape,
        second_order=req.second_order,
    )
    return model.vae.decode(latent).numpy()


def colorize(req: InferenceRequest, ckpt: Checkpoint) -> np.ndarray:
    """Colorize one sketch; returns a ``(3, H, W)`` image in ``[0, 1]``."""
    return colorize_batch([req], ckpt)[0]
